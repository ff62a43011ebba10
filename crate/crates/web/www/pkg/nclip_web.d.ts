/* tslint:disable */
/* eslint-disable */

/**
 * Non-contrastive training on the default synthetic world (C=16, B=64,
 * K=64, 10 epochs of 100 steps), advanced one epoch per call.
 */
export class CollapseRun {
    free(): void;
    [Symbol.dispose](): void;
    constructor(lambda1: number, lambda2: number, seed: number);
    output_dim(): number;
    /**
     * Rows of `[step, row_std, acc_nc, l_eh, l_he]`, flattened; empty once
     * the schedule is done.
     */
    run_epoch(): Float64Array;
    total_steps(): number;
}

export function clip_loss_curve(b: number, dim: number, alignment: number, seed: number, sigmas: Float64Array): Float64Array;

export function transform_heatmap(kind: string, b: number, k: number, target_temperature: number, seed: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_collapserun_free: (a: number, b: number) => void;
    readonly clip_loss_curve: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly collapserun_new: (a: number, b: number, c: number) => [number, number, number];
    readonly collapserun_output_dim: (a: number) => number;
    readonly collapserun_run_epoch: (a: number) => [number, number, number, number];
    readonly collapserun_total_steps: (a: number) => number;
    readonly transform_heatmap: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
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
