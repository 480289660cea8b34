// Wire protocol of the gateway: WebSocket frames and HTTP payload shapes.

export interface ReplyFrame {
    reply: string;
    text: string | null;
    session: string | null;
    modality: string | null;
    trace_id: string | null;
    turn: number | null;
}

export interface ErrorFrame {
    error: string;
}

export type InboundFrame =
    | { kind: "reply"; frame: ReplyFrame }
    | { kind: "error"; frame: ErrorFrame }
    | { kind: "invalid"; raw: string };

export function parseFrame(raw: string): InboundFrame {
    let data: unknown;
    try {
        data = JSON.parse(raw);
    } catch {
        return { kind: "invalid", raw };
    }
    if (typeof data !== "object" || data === null) {
        return { kind: "invalid", raw };
    }
    const obj = data as Record<string, unknown>;
    if (typeof obj.error === "string") {
        return { kind: "error", frame: { error: obj.error } };
    }
    if (typeof obj.reply === "string") {
        return {
            kind: "reply",
            frame: {
                reply: obj.reply,
                text: typeof obj.text === "string" ? obj.text : null,
                session: typeof obj.session === "string" ? obj.session : null,
                modality: typeof obj.modality === "string" ? obj.modality : null,
                trace_id: typeof obj.trace_id === "string" ? obj.trace_id : null,
                turn: typeof obj.turn === "number" ? obj.turn : null,
            },
        };
    }
    return { kind: "invalid", raw };
}

export interface OrderOutcome {
    status: "accepted" | "rejected";
    reason: string | null;
}

const REJECT_PATTERN = /work order (?:\S+ )?rejected: ([A-Z_]+)/i;
const ACCEPT_PATTERN = /work order \S+ accepted/i;

// Work-order replies render as a badge with the accept/reject outcome.
export function classifyOrderReply(text: string): OrderOutcome | null {
    const rejected = REJECT_PATTERN.exec(text);
    if (rejected) {
        return { status: "rejected", reason: rejected[1] };
    }
    if (ACCEPT_PATTERN.test(text)) {
        return { status: "accepted", reason: null };
    }
    return null;
}

export interface BenchmarkSummary {
    count: number;
    p50: number;
    p95: number;
    error_rate: number;
}

export interface MetricsSnapshot {
    broker: Record<string, number>;
    benchmarks: Record<string, BenchmarkSummary>;
}

export interface SessionSnapshot {
    session_id: string;
    principal: string | null;
    status: string;
    state_vars: Record<string, unknown>;
    authenticated: boolean;
    context: {
        active_intent: string | null;
        active_entity: Record<string, unknown> | null;
        slot_memory: Record<string, unknown>;
    };
}
