/* tslint:disable */
/* eslint-disable */

/**
 * A rendered scan: the range image plus its components.
 */
export class Scene {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Pixels colored by prior category.
     */
    category_rgba(): Uint8Array;
    /**
     * Pixels colored by component id.
     */
    component_rgba(): Uint8Array;
    /**
     * Component and category under pixel `(u, v)`, as text.
     */
    describe_pixel(u: number, v: number): string;
    height(): number;
    /**
     * Sample a street scene from `seed` and scan it with `rings` x `azimuths`
     * beams.
     */
    constructor(seed: bigint, rings: number, azimuths: number);
    /**
     * Range channel as RGBA, near is bright.
     */
    range_rgba(): Uint8Array;
    /**
     * One-line summary of the pre-segmentation.
     */
    summary(): string;
    width(): number;
}

/**
 * Pixel `[u, v]` of a point under a `width x height` projection, or an
 * empty array when it falls outside the vertical field of view.
 */
export function project(x: number, y: number, z: number, width: number, height: number, fov_up_deg: number, fov_down_deg: number): Uint32Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_scene_free: (a: number, b: number) => void;
    readonly project: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
    readonly scene_category_rgba: (a: number) => [number, number];
    readonly scene_component_rgba: (a: number) => [number, number];
    readonly scene_describe_pixel: (a: number, b: number, c: number) => [number, number];
    readonly scene_height: (a: number) => number;
    readonly scene_new: (a: bigint, b: number, c: number) => [number, number, number];
    readonly scene_range_rgba: (a: number) => [number, number];
    readonly scene_summary: (a: number) => [number, number];
    readonly scene_width: (a: number) => number;
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
