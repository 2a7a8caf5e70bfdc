// WebSocket message schema shared with the drive server.
//
// Inbound messages are validated field by field before they reach any
// state or rendering code; anything that does not match the schema is
// rejected (the caller logs a diagnostic and drops it).  Outbound attack
// messages are built here so every command the dashboard emits carries
// exactly the fields the server accepts for the chosen method.

export type AttackMethod = "none" | "random" | "fgsmr" | "uapr";
export type Direction = "left" | "right";
export type LpNorm = 2 | "inf";

export const ATTACK_METHODS: readonly AttackMethod[] = [
  "none",
  "random",
  "fgsmr",
  "uapr",
];

/** Attack configuration echoed back inside every status message. */
export interface AttackEcho {
  method: AttackMethod;
  direction?: Direction;
  epsilon?: number;
  p?: LpNorm;
  xi?: number;
  seed?: number;
  /** Present after a universal perturbation finishes learning. */
  learning_ms?: number;
  eta_norm?: number;
}

/** Running deviation metrics accumulated since the attack was engaged. */
export interface Metrics {
  abs_dev: number;
  rel_dev_pct: number | null;
  rmse: number;
  frames: number;
  off_road_frame: number | null;
  mean_latency_ms: number;
}

export interface StatusMessage {
  type: "status";
  attack: AttackEcho;
  metrics: Metrics;
}

/** Clean/perturbed/perturbation camera views as base64 PNG payloads. */
export interface PreviewMessage {
  type: "preview";
  frame_id: number;
  clean: string;
  perturbed: string;
  perturbation: string;
}

export interface ErrorMessage {
  type: "error";
  code: string;
  detail: string;
}

export type ServerMessage = StatusMessage | PreviewMessage | ErrorMessage;

/** Raw values captured from the attack control form. */
export interface AttackForm {
  method: AttackMethod;
  direction: Direction;
  epsilon: number;
  p: LpNorm;
  xi: number;
}

export interface AttackMessage {
  type: "attack";
  method: AttackMethod;
  direction?: Direction;
  epsilon?: number;
  p?: LpNorm;
  xi?: number;
}

export type BuildResult =
  | { ok: true; message: AttackMessage }
  | { ok: false; reason: string };

function isRecord(v: unknown): v is Record<string, unknown> {
  return typeof v === "object" && v !== null && !Array.isArray(v);
}

function isFinite_(v: unknown): v is number {
  return typeof v === "number" && Number.isFinite(v);
}

function isCount(v: unknown): v is number {
  return isFinite_(v) && Number.isInteger(v) && v >= 0;
}

function isLpNorm(v: unknown): v is LpNorm {
  return v === 2 || v === "inf";
}

function isDirection(v: unknown): v is Direction {
  return v === "left" || v === "right";
}

function isMethod(v: unknown): v is AttackMethod {
  return typeof v === "string" && (ATTACK_METHODS as string[]).includes(v);
}

function validAttackEcho(v: unknown): v is AttackEcho {
  if (!isRecord(v) || !isMethod(v.method)) return false;
  if ("direction" in v && !isDirection(v.direction)) return false;
  if ("epsilon" in v && !isFinite_(v.epsilon)) return false;
  if ("p" in v && !isLpNorm(v.p)) return false;
  if ("xi" in v && !isFinite_(v.xi)) return false;
  if ("seed" in v && !isCount(v.seed)) return false;
  if ("learning_ms" in v && !isFinite_(v.learning_ms)) return false;
  if ("eta_norm" in v && !isFinite_(v.eta_norm)) return false;
  return true;
}

function validMetrics(v: unknown): v is Metrics {
  if (!isRecord(v)) return false;
  return (
    isFinite_(v.abs_dev) &&
    (v.rel_dev_pct === null || isFinite_(v.rel_dev_pct)) &&
    isFinite_(v.rmse) &&
    isCount(v.frames) &&
    (v.off_road_frame === null || isCount(v.off_road_frame)) &&
    isFinite_(v.mean_latency_ms)
  );
}

function validStatus(v: Record<string, unknown>): v is StatusMessage & Record<string, unknown> {
  return validAttackEcho(v.attack) && validMetrics(v.metrics);
}

function validPreview(v: Record<string, unknown>): v is PreviewMessage & Record<string, unknown> {
  return (
    isCount(v.frame_id) &&
    typeof v.clean === "string" && v.clean.length > 0 &&
    typeof v.perturbed === "string" && v.perturbed.length > 0 &&
    typeof v.perturbation === "string" && v.perturbation.length > 0
  );
}

function validError(v: Record<string, unknown>): v is ErrorMessage & Record<string, unknown> {
  return typeof v.code === "string" && typeof v.detail === "string";
}

/**
 * Parse one inbound frame.  Returns the typed message, or null when the
 * frame is not valid JSON or does not match the schema exactly enough to
 * render safely.
 */
export function parseServerMessage(raw: string): ServerMessage | null {
  let value: unknown;
  try {
    value = JSON.parse(raw);
  } catch {
    return null;
  }
  if (!isRecord(value)) return null;
  switch (value.type) {
    case "status":
      return validStatus(value) ? (value as unknown as StatusMessage) : null;
    case "preview":
      return validPreview(value) ? (value as unknown as PreviewMessage) : null;
    case "error":
      return validError(value) ? (value as unknown as ErrorMessage) : null;
    default:
      return null;
  }
}

/**
 * Turn form values into an attack message, including only the fields the
 * selected method uses.  Invalid budgets or a missing direction yield a
 * human-readable reason instead of a message.
 */
export function buildAttackMessage(form: AttackForm): BuildResult {
  const fail = (reason: string): BuildResult => ({ ok: false, reason });
  if (!isMethod(form.method)) return fail(`unknown method ${String(form.method)}`);

  if (form.method === "fgsmr" || form.method === "uapr") {
    if (!isDirection(form.direction)) return fail("choose a direction (left or right)");
  }
  if (form.method === "fgsmr" || form.method === "random") {
    if (!isFinite_(form.epsilon) || form.epsilon <= 0 || form.epsilon > 1) {
      return fail("epsilon must be in (0, 1]");
    }
  }
  if (form.method === "uapr" || form.method === "random") {
    if (!isLpNorm(form.p)) return fail('p must be 2 or "inf"');
  }
  if (form.method === "uapr") {
    if (!isFinite_(form.xi) || form.xi <= 0) return fail("xi must be positive");
  }

  const message: AttackMessage = { type: "attack", method: form.method };
  switch (form.method) {
    case "none":
      break;
    case "random":
      message.epsilon = form.epsilon;
      message.p = form.p;
      break;
    case "fgsmr":
      message.direction = form.direction;
      message.epsilon = form.epsilon;
      break;
    case "uapr":
      message.direction = form.direction;
      message.p = form.p;
      message.xi = form.xi;
      break;
  }
  return { ok: true, message };
}
