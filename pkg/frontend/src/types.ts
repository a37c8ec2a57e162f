// JSON shapes shared with the editing service. These mirror the documents
// the HTTP API accepts and returns; the UI never invents fields of its own.

export interface DragSpec {
  dx: number;
  dy: number;
  mode?: "drag" | "paste";
  source_image_ref?: string | null;
  source_mask_ref?: string | null;
}

export interface ControlSpec {
  mode?: "cross_attn" | "mutual_self_attn" | "none";
  tau_cross?: number;
  self_attn_start?: number;
  q_margin?: number | null;
}

export interface EnergySpec {
  m_edit?: number;
  m_content?: number;
  m_inpaint?: number;
  feature_layer?: string;
  t_lo?: number;
  t_hi?: number;
  clip_norm?: number;
}

export interface NpmlSpec {
  lambda_c?: number;
  lambda_i?: number;
  inner_steps?: number;
  step_size?: number;
  resolution?: number;
  t_lo?: number;
  t_hi?: number;
}

export interface AblationSpec {
  ggs?: boolean;
  npml?: boolean;
  dnp?: boolean;
  dref?: boolean;
}

export interface EditSpec {
  version?: number;
  image_ref?: string | null;
  mask_ref?: string | null;
  prompt_source: string;
  prompt_target: string;
  object_word?: string | null;
  drag: DragSpec;
  control?: ControlSpec;
  energy?: EnergySpec;
  npml?: NpmlSpec;
  cfg_scale_1?: number;
  cfg_scale_2?: number;
  T?: number;
  T_skip?: number;
  seed?: number;
  ablations?: AblationSpec;
}

export interface Violation {
  pointer: string;
  message: string;
}

export interface HealthzResponse {
  status: string;
  version: string;
  model: { T: number; resolution: number; vocab: string[] };
}

export interface JobEvent {
  stage: string;
  t?: number;
  cached?: boolean;
  preview?: string;
  metrics?: Record<string, number>;
  results?: Record<string, string>;
  error?: string;
  [key: string]: unknown;
}

export type JobState = "queued" | "running" | "done" | "failed" | "interrupted";

export interface JobStatusResponse {
  job_id: string;
  session_id: string;
  status: JobState;
  error?: string | null;
  metrics?: Record<string, number>;
  [key: string]: unknown;
}

export interface EventsResponse {
  events: JobEvent[];
  cursor: number;
  status: JobState;
}
