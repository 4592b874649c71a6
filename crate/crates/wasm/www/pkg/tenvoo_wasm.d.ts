/* tslint:disable */
/* eslint-disable */

export function alpha_bar(t: number, steps: number): number;

/**
 * RGBA pixels of the same slice after `t` of `steps` forward diffusion steps.
 */
export function noised_slice(tag: string, size: number, seed: number, z: number, t: number, steps: number): Uint8Array;

/**
 * Adapter parameters for ranks `1..=max_rank`.
 */
export function param_curve(kind: string, c_out: number, c_in: number, k: number, max_rank: number): Uint32Array;

/**
 * RGBA pixels of axial slice `z` of a phantom.
 */
export function phantom_slice(tag: string, size: number, seed: number, z: number): Uint8Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly alpha_bar: (a: number, b: number) => [number, number, number];
    readonly noised_slice: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
    readonly param_curve: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly phantom_slice: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
