// Test doubles: a controllable WebSocket, deterministic timers, and
// payload builders matching the server's wire schema.

import type { SocketLike } from "../src/client.js";
import type { AttackEcho, Metrics, PreviewMessage, StatusMessage } from "../src/wire.js";

export class FakeSocket implements SocketLike {
  static readonly CONNECTING = 0;
  static readonly OPEN = 1;
  static readonly CLOSED = 3;

  readyState = FakeSocket.CONNECTING;
  sent: string[] = [];
  onopen: (() => void) | null = null;
  onclose: (() => void) | null = null;
  onmessage: ((event: { data: unknown }) => void) | null = null;

  constructor(public readonly url: string) {}

  send(data: string): void {
    this.sent.push(data);
  }

  close(): void {
    this.readyState = FakeSocket.CLOSED;
    this.onclose?.();
  }

  // --- test-side controls -------------------------------------------------
  serverOpen(): void {
    this.readyState = FakeSocket.OPEN;
    this.onopen?.();
  }

  serverSend(data: unknown): void {
    this.onmessage?.({ data });
  }

  serverDrop(): void {
    this.readyState = FakeSocket.CLOSED;
    this.onclose?.();
  }
}

export class FakeTimers {
  pending: Array<{ fn: () => void; ms: number; id: number }> = [];
  private nextId = 1;

  set = (fn: () => void, ms: number): unknown => {
    const id = this.nextId++;
    this.pending.push({ fn, ms, id });
    return id;
  };

  clear = (handle: unknown): void => {
    this.pending = this.pending.filter((t) => t.id !== handle);
  };

  /** Fire the earliest pending timer and return the delay it was given. */
  runNext(): number {
    const timer = this.pending.shift();
    if (timer === undefined) throw new Error("no pending timer");
    timer.fn();
    return timer.ms;
  }
}

export function makeStatus(
  metrics: Partial<Metrics> = {},
  attack: AttackEcho = { method: "none" },
): StatusMessage {
  return {
    type: "status",
    attack,
    metrics: {
      abs_dev: 0.0,
      rel_dev_pct: null,
      rmse: 0.0,
      frames: 0,
      off_road_frame: null,
      mean_latency_ms: 0.0,
      ...metrics,
    },
  };
}

export function makePreview(frameId = 0): PreviewMessage {
  return {
    type: "preview",
    frame_id: frameId,
    clean: "Y2xlYW4=",
    perturbed: "cGVydHVyYmVk",
    perturbation: "ZXRh",
  };
}
