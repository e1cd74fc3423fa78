/* tslint:disable */
/* eslint-disable */

/**
 * Gradient of one anchor's loss with respect to a single negative's
 * similarity, as that negative's α runs over `[0, 1]`. The anchor has a
 * positive at similarity `s_pos` and `negatives` other negatives at `s_neg`.
 */
export function gradient_profile(s_pos: number, s_neg: number, negatives: number, temperature: number, points: number): string;

/**
 * Samples a nuScenes-like batch of `m` superpixels and reports, per class,
 * the count, the mean anchor weight and how many same-class negatives the
 * KNN mask removes.
 */
export function similarity_explorer(m: number, k_percent: number, balance: string, seed: bigint): string;

/**
 * Trains a small model and returns its loss history.
 */
export function train_curve(variant: string, steps: number, m: number, seed: bigint): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly gradient_profile: (a: number, b: number, c: number, d: number, e: number) => [number, number];
    readonly similarity_explorer: (a: number, b: number, c: number, d: number, e: bigint) => [number, number];
    readonly train_curve: (a: number, b: number, c: number, d: number, e: bigint) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
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
