/* tslint:disable */
/* eslint-disable */

export function flops_curve(preset: string, decoder_depth: number, decoder_width: number, steps: number): Float64Array;

/**
 * Visible patch count for `n` patches at ratio `r`.
 */
export function kept_patches(n: number, ratio: number): number;

/**
 * Row-major `[positions, dim]` sine-cosine table.
 */
export function pos_embed(positions: number, dim: number): Float32Array;

export function sample_mask(side: number, ratio: number, sampling: string, seed: number): Uint8Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly flops_curve: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly kept_patches: (a: number, b: number) => number;
    readonly pos_embed: (a: number, b: number) => [number, number, number, number];
    readonly sample_mask: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
