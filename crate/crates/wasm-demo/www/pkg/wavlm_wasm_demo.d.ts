/* tslint:disable */
/* eslint-disable */

/**
 * Row-major `frames × frames` attention weights of head 0 for random input
 * frames, with the demo distance prior in the bias table.
 */
export function attention_heatmap(frames: number, seed: bigint, slope: number, w_scalar: number): Float64Array;

/**
 * Bucket of every offset in `lo..=hi`.
 */
export function bucket_curve(n: number, m: number, lo: number, hi: number): Uint32Array;

/**
 * Gated relative-position bias for every offset in `lo..=hi`, for a query
 * whose update and reset gate pre-activations are `qu` and `qw`.
 */
export function gated_bias_curve(n: number, m: number, lo: number, hi: number, slope: number, qu: number, qw: number, w_scalar: number): Float64Array;

/**
 * Mixes four synthetic 0.25 s utterances (plus two noise clips) and returns
 * `{clean, mixed, events}` as JSON.
 */
export function simulate_mix(seed: bigint, p: number, p_n: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly attention_heatmap: (a: number, b: bigint, c: number, d: number) => [number, number, number, number];
    readonly bucket_curve: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly gated_bias_curve: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number) => [number, number, number, number];
    readonly simulate_mix: (a: bigint, b: number, c: number) => [number, number, number, number];
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
