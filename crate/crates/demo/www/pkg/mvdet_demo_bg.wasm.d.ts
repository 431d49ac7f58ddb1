/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_demo_free: (a: number, b: number) => void;
export const demo_bev_height: (a: number) => number;
export const demo_bev_rgba: (a: number) => [number, number];
export const demo_bev_width: (a: number) => number;
export const demo_fit: (a: number, b: number, c: number) => [number, number, number, number];
export const demo_height: (a: number) => number;
export const demo_image_rgba: (a: number, b: number) => [number, number];
export const demo_mask_rgba: (a: number, b: number) => [number, number];
export const demo_new: (a: bigint, b: number) => [number, number, number];
export const demo_occupancy: (a: number) => number;
export const demo_render_height: (a: number) => number;
export const demo_render_rgba: (a: number, b: number) => [number, number, number, number];
export const demo_render_width: (a: number) => number;
export const demo_segment: (a: number, b: number, c: number) => [number, number, number];
export const demo_views: (a: number) => number;
export const demo_width: (a: number) => number;
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_start: () => void;
