/* tslint:disable */
/* eslint-disable */

/**
 * One synthetic scene and two randomly initialised detectors, equivariant and plain.
 */
export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Class-max heat logits of the rotated scene, min-max scaled to `[0, 1]`, row-major with
     * the first row at the largest `y`.
     */
    heatmap(angle_deg: number, equivariant: boolean): Float64Array;
    constructor(scene_seed: number, model_seed: number);
    /**
     * Commuting-diagram residuals per layer and rotation, as JSON rows.
     */
    residuals_json(equivariant: boolean): string;
    /**
     * The scene turned counter-clockwise by `angle_deg` about the grid center, as JSON.
     */
    scene_json(angle_deg: number): string;
    readonly grid_cells: number;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly demo_grid_cells: (a: number) => number;
    readonly demo_heatmap: (a: number, b: number, c: number) => [number, number, number, number];
    readonly demo_new: (a: number, b: number) => [number, number, number];
    readonly demo_residuals_json: (a: number, b: number) => [number, number, number, number];
    readonly demo_scene_json: (a: number, b: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
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
