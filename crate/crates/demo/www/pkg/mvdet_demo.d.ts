/* tslint:disable */
/* eslint-disable */

export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    bev_height(): number;
    /**
     * BEV map with x to the right and y up, one pixel per column.
     */
    bev_rgba(): Uint8Array;
    bev_width(): number;
    /**
     * Fits the volume to the current masks and returns a JSON summary with
     * metrics, detections and ground truth.
     */
    fit(lambda_vbr: number, iterations: number): string;
    height(): number;
    image_rgba(view: number): Uint8Array;
    mask_rgba(view: number): Uint8Array;
    /**
     * Default configuration except for a shorter fit, which keeps a browser
     * run to several seconds.
     */
    constructor(seed: bigint, pedestrians: number);
    /**
     * Mean over BEV cells of the column maximum of the fitted density.
     */
    occupancy(): number;
    render_height(): number;
    /**
     * Rendered opacity of the fitted volume from one camera, at render size.
     */
    render_rgba(view: number): Uint8Array;
    render_width(): number;
    /**
     * Re-runs SIS and returns the IoU against the true pedestrian masks.
     */
    segment(t_pca: number, semantic_selection: boolean): number;
    views(): number;
    width(): number;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly demo_bev_height: (a: number) => number;
    readonly demo_bev_rgba: (a: number) => [number, number];
    readonly demo_bev_width: (a: number) => number;
    readonly demo_fit: (a: number, b: number, c: number) => [number, number, number, number];
    readonly demo_height: (a: number) => number;
    readonly demo_image_rgba: (a: number, b: number) => [number, number];
    readonly demo_mask_rgba: (a: number, b: number) => [number, number];
    readonly demo_new: (a: bigint, b: number) => [number, number, number];
    readonly demo_occupancy: (a: number) => number;
    readonly demo_render_height: (a: number) => number;
    readonly demo_render_rgba: (a: number, b: number) => [number, number, number, number];
    readonly demo_render_width: (a: number) => number;
    readonly demo_segment: (a: number, b: number, c: number) => [number, number, number];
    readonly demo_views: (a: number) => number;
    readonly demo_width: (a: number) => number;
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
