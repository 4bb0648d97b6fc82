/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_scene_free: (a: number, b: number) => void;
export const project: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
export const scene_category_rgba: (a: number) => [number, number];
export const scene_component_rgba: (a: number) => [number, number];
export const scene_describe_pixel: (a: number, b: number, c: number) => [number, number];
export const scene_height: (a: number) => number;
export const scene_new: (a: bigint, b: number, c: number) => [number, number, number];
export const scene_range_rgba: (a: number) => [number, number];
export const scene_summary: (a: number) => [number, number];
export const scene_width: (a: number) => number;
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
