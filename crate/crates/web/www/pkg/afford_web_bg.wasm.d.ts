/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_codebookdemo_free: (a: number, b: number) => void;
export const __wbg_playground_free: (a: number, b: number) => void;
export const codebookdemo_assignments: (a: number) => [number, number];
export const codebookdemo_distortion: (a: number) => number;
export const codebookdemo_entries: (a: number) => [number, number];
export const codebookdemo_new: (a: number, b: number, c: number, d: bigint) => [number, number, number];
export const codebookdemo_points: (a: number) => [number, number];
export const codebookdemo_set_gamma: (a: number, b: number) => void;
export const codebookdemo_step: (a: number) => [number, number, number];
export const playground_behave: (a: number, b: number, c: number) => [number, number, number];
export const playground_frame: (a: number, b: number) => [number, number];
export const playground_new: (a: bigint) => [number, number, number];
export const playground_parse_json: (a: number, b: number) => [number, number, number, number];
export const playground_propose_goals: (a: number, b: number, c: bigint, d: number) => [number, number, number, number];
export const playground_reset: (a: number, b: bigint) => [number, number];
export const playground_sheet_width: (a: number, b: number) => number;
export const playground_size: (a: number) => number;
export const playground_state_json: (a: number) => [number, number, number, number];
export const playground_step: (a: number, b: number, c: number, d: number, e: number) => void;
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_start: () => void;
