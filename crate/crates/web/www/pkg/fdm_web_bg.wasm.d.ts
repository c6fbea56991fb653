/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const alpha_bars: (a: number, b: number, c: number) => [number, number, number, number];
export const image_size: () => number;
export const noised: (a: number, b: number, c: number, d: number, e: number, f: number, g: bigint) => [number, number, number, number];
export const phantom_image: (a: number, b: number, c: bigint) => [number, number, number, number];
export const phantom_mask: (a: number, b: number, c: bigint) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_start: () => void;
