/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_collapserun_free: (a: number, b: number) => void;
export const clip_loss_curve: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
export const collapserun_new: (a: number, b: number, c: number) => [number, number, number];
export const collapserun_output_dim: (a: number) => number;
export const collapserun_run_epoch: (a: number) => [number, number, number, number];
export const collapserun_total_steps: (a: number) => number;
export const transform_heatmap: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_start: () => void;
