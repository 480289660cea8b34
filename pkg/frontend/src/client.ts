// Gateway client: one WebSocket per channel with reconnect backoff, plus
// fetch helpers for the three HTTP endpoints. Socket and fetch are
// injectable so tests can script them.

import { InboundFrame, MetricsSnapshot, parseFrame, SessionSnapshot } from "./protocol.js";

export interface SocketLike {
    send(data: string): void;
    close(): void;
    onopen: (() => void) | null;
    onmessage: ((event: { data: string }) => void) | null;
    onclose: (() => void) | null;
    onerror: (() => void) | null;
}

export type SocketFactory = (url: string) => SocketLike;
export type FetchLike = (url: string, init?: Record<string, unknown>) => Promise<{
    ok: boolean;
    status: number;
    json(): Promise<unknown>;
}>;

export interface GatewayEvents {
    onStatus(status: "connecting" | "connected" | "disconnected" | "error"): void;
    onFrame(frame: InboundFrame): void;
}

const BACKOFF_BASE_MS = 250;
const BACKOFF_CAP_MS = 5000;
export const TURN_TIMEOUT_MS = 10_000;

export class GatewayClient {
    private socket: SocketLike | null = null;
    private attempts = 0;
    private closed = false;
    private reconnectTimer: ReturnType<typeof setTimeout> | null = null;
    private turnTimers: ReturnType<typeof setTimeout>[] = [];

    constructor(
        private readonly wsBase: string,
        private readonly httpBase: string,
        private readonly channelId: string,
        private readonly events: GatewayEvents,
        private readonly makeSocket: SocketFactory,
        private readonly fetchImpl: FetchLike,
        private readonly onTurnTimeout: () => void = () => undefined,
    ) {}

    connect(): void {
        this.closed = false;
        this.open();
    }

    private open(): void {
        this.events.onStatus("connecting");
        const socket = this.makeSocket(`${this.wsBase}/channel/${this.channelId}`);
        this.socket = socket;
        socket.onopen = () => {
            this.attempts = 0;
            this.events.onStatus("connected");
        };
        socket.onmessage = (event) => {
            this.clearOneTurnTimer();
            this.events.onFrame(parseFrame(event.data));
        };
        socket.onerror = () => {
            this.events.onStatus("error");
        };
        socket.onclose = () => {
            this.socket = null;
            if (this.closed) {
                return;
            }
            this.events.onStatus("disconnected");
            this.scheduleReconnect();
        };
    }

    private scheduleReconnect(): void {
        const delay = Math.min(BACKOFF_CAP_MS, BACKOFF_BASE_MS * 2 ** this.attempts);
        this.attempts += 1;
        this.reconnectTimer = setTimeout(() => this.open(), delay);
    }

    sendTurn(text: string): boolean {
        if (this.socket === null) {
            return false;
        }
        this.socket.send(JSON.stringify({ text }));
        const timer = setTimeout(() => {
            this.turnTimers = this.turnTimers.filter((t) => t !== timer);
            this.onTurnTimeout();
        }, TURN_TIMEOUT_MS);
        this.turnTimers.push(timer);
        return true;
    }

    private clearOneTurnTimer(): void {
        const timer = this.turnTimers.shift();
        if (timer !== undefined) {
            clearTimeout(timer);
        }
    }

    close(): void {
        this.closed = true;
        if (this.reconnectTimer !== null) {
            clearTimeout(this.reconnectTimer);
        }
        for (const timer of this.turnTimers) {
            clearTimeout(timer);
        }
        this.turnTimers = [];
        this.socket?.close();
        this.socket = null;
    }

    async fetchMetrics(): Promise<MetricsSnapshot | null> {
        try {
            const response = await this.fetchImpl(`${this.httpBase}/metrics`);
            if (!response.ok) {
                return null;
            }
            return (await response.json()) as MetricsSnapshot;
        } catch {
            return null;
        }
    }

    async fetchSession(sessionId: string): Promise<SessionSnapshot | null> {
        try {
            const response = await this.fetchImpl(`${this.httpBase}/sessions/${sessionId}`);
            if (!response.ok) {
                return null;
            }
            return (await response.json()) as SessionSnapshot;
        } catch {
            return null;
        }
    }

    async postChaos(body: Record<string, unknown>): Promise<boolean> {
        try {
            const response = await this.fetchImpl(`${this.httpBase}/chaos`, {
                method: "POST",
                headers: { "Content-Type": "application/json" },
                body: JSON.stringify(body),
            });
            return response.ok;
        } catch {
            return false;
        }
    }
}
