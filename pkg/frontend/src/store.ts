// Single state store behind the console UI. All WebSocket events and poll
// results funnel through these functions on one event loop; the message log
// is append-only within a connection.

import {
    classifyOrderReply,
    MetricsSnapshot,
    OrderOutcome,
    ReplyFrame,
    SessionSnapshot,
} from "./protocol.js";

export type ConnectionStatus = "idle" | "connecting" | "connected" | "disconnected" | "error";

export interface LogEntry {
    kind: "user" | "platform" | "system";
    text: string;
    turn: number | null;
    traceId: string | null;
    at: number;
}

export interface ChaosState {
    ackDropProb: number;
    killedConsumers: string[];
    killedDatanodes: string[];
}

export interface ConsoleState {
    status: ConnectionStatus;
    channelId: string;
    sessionId: string | null;
    log: LogEntry[];
    authenticated: boolean;
    lastOrder: OrderOutcome | null;
    metrics: MetricsSnapshot | null;
    metricsStale: boolean;
    session: SessionSnapshot | null;
    sessionStale: boolean;
    chaos: ChaosState;
    pendingTurns: number;
    seenTraces: Set<string>;
    lastTurn: number;
    invariantViolations: string[];
}

export function initialState(channelId: string): ConsoleState {
    return {
        status: "idle",
        channelId,
        sessionId: null,
        log: [],
        authenticated: false,
        lastOrder: null,
        metrics: null,
        metricsStale: false,
        session: null,
        sessionStale: false,
        chaos: { ackDropProb: 0, killedConsumers: [], killedDatanodes: [] },
        pendingTurns: 0,
        seenTraces: new Set(),
        lastTurn: 0,
        invariantViolations: [],
    };
}

export function setStatus(state: ConsoleState, status: ConnectionStatus): void {
    state.status = status;
}

export function appendUserTurn(state: ConsoleState, text: string, at: number): void {
    state.log.push({ kind: "user", text, turn: null, traceId: null, at });
    state.pendingTurns += 1;
}

export function appendSystemNote(state: ConsoleState, text: string, at: number): void {
    state.log.push({ kind: "system", text, turn: null, traceId: null, at });
}

// Applies one reply frame. Returns false when the frame is a duplicate
// (same trace already rendered) or violates turn monotonicity; the platform
// deduplicates upstream, so either case is logged as an invariant violation
// rather than rendered twice.
export function applyReply(state: ConsoleState, frame: ReplyFrame, at: number): boolean {
    if (frame.trace_id !== null && state.seenTraces.has(frame.trace_id)) {
        state.invariantViolations.push(`duplicate reply frame for trace ${frame.trace_id}`);
        return false;
    }
    if (frame.turn !== null) {
        if (frame.turn <= state.lastTurn) {
            state.invariantViolations.push(
                `turn id not increasing: ${frame.turn} after ${state.lastTurn}`,
            );
            return false;
        }
        state.lastTurn = frame.turn;
    }
    if (frame.trace_id !== null) {
        state.seenTraces.add(frame.trace_id);
    }
    state.log.push({
        kind: "platform",
        text: frame.reply,
        turn: frame.turn,
        traceId: frame.trace_id,
        at,
    });
    if (state.pendingTurns > 0) {
        state.pendingTurns -= 1;
    }
    if (frame.session !== null) {
        state.sessionId = frame.session;
    }
    const order = classifyOrderReply(frame.text ?? frame.reply);
    if (order !== null) {
        state.lastOrder = order;
    }
    return true;
}

export function markTimeout(state: ConsoleState, at: number): void {
    if (state.pendingTurns > 0) {
        state.pendingTurns -= 1;
        appendSystemNote(state, "no reply (timed out)", at);
    }
}

export function applyMetrics(state: ConsoleState, metrics: MetricsSnapshot | null): void {
    if (metrics === null) {
        state.metricsStale = true;
        return;
    }
    state.metrics = metrics;
    state.metricsStale = false;
}

export function applySession(state: ConsoleState, session: SessionSnapshot | null): void {
    if (session === null) {
        state.sessionStale = true;
        return;
    }
    state.session = session;
    state.sessionStale = false;
    state.authenticated = session.authenticated;
}
