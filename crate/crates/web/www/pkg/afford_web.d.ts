/* tslint:disable */
/* eslint-disable */

/**
 * A K-entry codebook over 2-D points drawn from a few compact blobs.
 */
export class CodebookDemo {
    free(): void;
    [Symbol.dispose](): void;
    assignments(): Uint32Array;
    /**
     * Mean squared distance from each point to its assigned entry.
     */
    distortion(): number;
    entries(): Float64Array;
    constructor(k: number, clusters: number, per_cluster: number, seed: bigint);
    points(): Float64Array;
    set_gamma(gamma: number): void;
    /**
     * Assign every point to its nearest entry, then one EMA update.
     * Returns the fraction of entries in use.
     */
    step(): number;
}

export class Playground {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Runs one scripted behavior to completion. Returns false when the
     * scene offers no valid instance of it.
     */
    behave(name: string): boolean;
    frame(scale: number): Uint8Array;
    constructor(seed: bigint);
    /**
     * Parser verdict for the current frame, optionally after adding uniform
     * noise of amplitude `noise` to every channel.
     */
    parse_json(noise: number): string;
    /**
     * `n` goal proposals from scripted behaviors, laid out side by side
     * after the current frame. The sheet is `sheet_width(n)` pixels wide
     * before upscaling.
     */
    propose_goals(n: number, seed: bigint, scale: number): Uint8Array;
    reset(seed: bigint): void;
    sheet_width(n: number): number;
    /**
     * Image side in pixels before upscaling.
     */
    size(): number;
    state_json(): string;
    /**
     * Moves the gripper by (dx, dy, dz) in meters; `grip > 0` closes.
     */
    step(dx: number, dy: number, dz: number, grip: number): void;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_codebookdemo_free: (a: number, b: number) => void;
    readonly __wbg_playground_free: (a: number, b: number) => void;
    readonly codebookdemo_assignments: (a: number) => [number, number];
    readonly codebookdemo_distortion: (a: number) => number;
    readonly codebookdemo_entries: (a: number) => [number, number];
    readonly codebookdemo_new: (a: number, b: number, c: number, d: bigint) => [number, number, number];
    readonly codebookdemo_points: (a: number) => [number, number];
    readonly codebookdemo_set_gamma: (a: number, b: number) => void;
    readonly codebookdemo_step: (a: number) => [number, number, number];
    readonly playground_behave: (a: number, b: number, c: number) => [number, number, number];
    readonly playground_frame: (a: number, b: number) => [number, number];
    readonly playground_new: (a: bigint) => [number, number, number];
    readonly playground_parse_json: (a: number, b: number) => [number, number, number, number];
    readonly playground_propose_goals: (a: number, b: number, c: bigint, d: number) => [number, number, number, number];
    readonly playground_reset: (a: number, b: bigint) => [number, number];
    readonly playground_sheet_width: (a: number, b: number) => number;
    readonly playground_size: (a: number) => number;
    readonly playground_state_json: (a: number) => [number, number, number, number];
    readonly playground_step: (a: number, b: number, c: number, d: number, e: number) => void;
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
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
