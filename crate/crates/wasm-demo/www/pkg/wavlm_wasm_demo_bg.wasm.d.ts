/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const attention_heatmap: (a: number, b: bigint, c: number, d: number) => [number, number, number, number];
export const bucket_curve: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const gated_bias_curve: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number) => [number, number, number, number];
export const simulate_mix: (a: bigint, b: number, c: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
