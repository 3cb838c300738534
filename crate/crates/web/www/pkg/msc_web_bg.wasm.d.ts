/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const bundled_scenario: (a: number, b: number) => [number, number];
export const bundled_scenarios: () => [number, number];
export const gantt_svg: (a: number, b: number) => [number, number, number, number];
export const jerk_limit: (a: number, b: number, c: number) => [number, number, number];
export const run_scenario: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const __externref_table_alloc: () => number;
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __externref_drop_slice: (a: number, b: number) => void;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_start: () => void;
