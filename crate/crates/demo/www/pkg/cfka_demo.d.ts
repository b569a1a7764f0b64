/* tslint:disable */
/* eslint-disable */

/**
 * Browser handle to a [`Lab`].
 */
export class Lab {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * JSON `{method, curve: [{step, a, b}]}`.
     */
    forgetting(method: string, strength: number, steps: number): string;
    /**
     * Builds a world and pre-trains on it. `variant` is `linear`, `softmax`
     * or `exponential`.
     */
    constructor(seed: number, individuals: number, variant: string, steps: number);
    /**
     * Pre-training curve as JSON `[{step, a, b}]`.
     */
    pretrainCurve(): string;
    /**
     * JSON `{points: [{token, role, di, attention}], pearson, spearman}`.
     */
    scatter(): string;
    vocabSize(): number;
}

/**
 * JSON `[{lr, max_drift}]` for the given learning rates.
 */
export function conservedDrift(seed: number, lrs: Float64Array, steps: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_lab_free: (a: number, b: number) => void;
    readonly conservedDrift: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly lab_forgetting: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly lab_new: (a: number, b: number, c: number, d: number, e: number) => [number, number, number];
    readonly lab_pretrainCurve: (a: number) => [number, number, number, number];
    readonly lab_scatter: (a: number) => [number, number, number, number];
    readonly lab_vocabSize: (a: number) => number;
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
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
