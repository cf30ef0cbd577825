/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_demo_free: (a: number, b: number) => void;
export const demo_frames: (a: number) => number;
export const demo_height: (a: number) => number;
export const demo_match_frames: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const demo_new: (a: bigint) => [number, number, number];
export const demo_range_image: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const demo_width: (a: number) => number;
export const ransac_demo: (a: number, b: number, c: number, d: bigint) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_start: () => void;
