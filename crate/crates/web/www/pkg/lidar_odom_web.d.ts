/* tslint:disable */
/* eslint-disable */

/**
 * A synthetic street scanned along a straight, slightly turning path.
 */
export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    frames(): number;
    height(): number;
    /**
     * Matches frames `a` and `b`, estimates the motion with RANSAC and
     * compares it against the ground truth. Returns JSON.
     */
    match_frames(a: number, b: number, max_lines: number): string;
    constructor(seed: bigint);
    /**
     * RGBA pixels of frame `frame`. `mode` is "raw" (sparse ranges),
     * "completed" or "equalized".
     */
    range_image(frame: number, mode: string): Uint8Array;
    width(): number;
}

/**
 * RANSAC against a single least-squares fit on `pairs` synthetic MKPs
 * with the given outlier ratio. Returns JSON.
 */
export function ransac_demo(pairs: number, outlier_ratio: number, threshold: number, seed: bigint): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly demo_frames: (a: number) => number;
    readonly demo_height: (a: number) => number;
    readonly demo_match_frames: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly demo_new: (a: bigint) => [number, number, number];
    readonly demo_range_image: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly demo_width: (a: number) => number;
    readonly ransac_demo: (a: number, b: number, c: number, d: bigint) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
