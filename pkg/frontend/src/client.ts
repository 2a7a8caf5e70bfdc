// WebSocket client for the drive server's viewer role.
//
// One socket per dashboard.  Inbound frames are validated by the wire
// module; malformed frames are logged to the console and dropped without
// touching the dashboard state.  When the connection drops, the client
// reconnects with exponential backoff.

import { DashboardState } from "./state.js";
import {
  buildAttackMessage,
  parseServerMessage,
  type AttackForm,
} from "./wire.js";

/** readyState value of an open WebSocket. */
const SOCKET_OPEN = 1;

/** Subset of the WebSocket interface the client uses (fakeable in tests). */
export interface SocketLike {
  readyState: number;
  send(data: string): void;
  close(): void;
  onopen: (() => void) | null;
  onclose: (() => void) | null;
  onmessage: ((event: { data: unknown }) => void) | null;
}

export type SocketFactory = (url: string) => SocketLike;

export interface ClientOptions {
  socketFactory?: SocketFactory;
  setTimer?: (fn: () => void, ms: number) => unknown;
  clearTimer?: (handle: unknown) => void;
  log?: (...args: unknown[]) => void;
}

export type SendResult = { ok: true } | { ok: false; reason: string };

export class DashboardClient {
  private readonly url: string;
  private readonly state: DashboardState;
  private readonly socketFactory: SocketFactory;
  private readonly setTimer: (fn: () => void, ms: number) => unknown;
  private readonly clearTimer: (handle: unknown) => void;
  private readonly log: (...args: unknown[]) => void;

  private socket: SocketLike | null = null;
  private reconnectAttempts = 0;
  private reconnectHandle: unknown = null;
  private closed = false;

  constructor(url: string, state: DashboardState, options: ClientOptions = {}) {
    this.url = url;
    this.state = state;
    this.socketFactory =
      options.socketFactory ??
      ((u) => new WebSocket(u) as unknown as SocketLike);
    this.setTimer = options.setTimer ?? ((fn, ms) => setTimeout(fn, ms));
    this.clearTimer = options.clearTimer ?? ((h) => clearTimeout(h as number));
    this.log = options.log ?? ((...args) => console.warn(...args));
  }

  connect(): void {
    if (this.closed) return;
    this.state.setConnection("connecting");
    const socket = this.socketFactory(this.url);
    this.socket = socket;
    socket.onopen = () => {
      this.reconnectAttempts = 0;
      this.state.setConnection("connected");
    };
    socket.onclose = () => {
      if (this.socket !== socket) return;
      this.socket = null;
      this.state.setConnection("disconnected");
      this.scheduleReconnect();
    };
    socket.onmessage = (event) => this.handleFrame(event.data);
  }

  /** Delay before the next reconnect attempt, doubling up to 30 s. */
  reconnectDelayMs(): number {
    return Math.min(1000 * 2 ** this.reconnectAttempts, 30000);
  }

  private scheduleReconnect(): void {
    if (this.closed || this.reconnectHandle !== null) return;
    const delay = this.reconnectDelayMs();
    this.reconnectAttempts += 1;
    this.reconnectHandle = this.setTimer(() => {
      this.reconnectHandle = null;
      this.connect();
    }, delay);
  }

  private handleFrame(data: unknown): void {
    if (typeof data !== "string") {
      this.log("dashboard: ignoring non-text frame from server");
      return;
    }
    const message = parseServerMessage(data);
    if (message === null) {
      this.log("dashboard: ignoring malformed server message:", data);
      return;
    }
    switch (message.type) {
      case "status":
        this.state.applyStatus(message);
        break;
      case "preview":
        this.state.applyPreview(message);
        break;
      case "error":
        this.state.applyError(message);
        break;
    }
  }

  /**
   * Validate the form, emit the attack message, and lock the form until
   * the server echoes the new configuration in a status message.
   */
  sendAttack(form: AttackForm): SendResult {
    if (this.socket === null || this.socket.readyState !== SOCKET_OPEN) {
      return { ok: false, reason: "not connected" };
    }
    const built = buildAttackMessage(form);
    if (!built.ok) return built;
    this.socket.send(JSON.stringify(built.message));
    this.state.markAttackSent();
    return { ok: true };
  }

  close(): void {
    this.closed = true;
    if (this.reconnectHandle !== null) {
      this.clearTimer(this.reconnectHandle);
      this.reconnectHandle = null;
    }
    this.socket?.close();
    this.socket = null;
  }
}

/** Derive the websocket endpoint from the page origin. */
export function endpointFromOrigin(origin: string): string {
  return origin.replace(/^http/, "ws") + "/ws";
}
