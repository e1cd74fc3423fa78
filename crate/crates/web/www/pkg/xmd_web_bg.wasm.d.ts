/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const gradient_profile: (a: number, b: number, c: number, d: number, e: number) => [number, number];
export const similarity_explorer: (a: number, b: number, c: number, d: number, e: bigint) => [number, number];
export const train_curve: (a: number, b: number, c: number, d: number, e: bigint) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_start: () => void;
