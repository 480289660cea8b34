import { afterEach, beforeEach, describe, expect, it, vi } from "vitest";

import { GatewayClient, SocketLike, TURN_TIMEOUT_MS } from "../src/client.js";
import { InboundFrame } from "../src/protocol.js";

class FakeSocket implements SocketLike {
    sent: string[] = [];
    closed = false;
    onopen: (() => void) | null = null;
    onmessage: ((event: { data: string }) => void) | null = null;
    onclose: (() => void) | null = null;
    onerror: (() => void) | null = null;

    send(data: string): void {
        this.sent.push(data);
    }

    close(): void {
        this.closed = true;
        this.onclose?.();
    }

    serverSends(payload: unknown): void {
        this.onmessage?.({ data: JSON.stringify(payload) });
    }
}

function makeHarness() {
    const sockets: FakeSocket[] = [];
    const statuses: string[] = [];
    const frames: InboundFrame[] = [];
    const timeouts: number[] = [];
    const client = new GatewayClient(
        "ws://gw",
        "http://gw",
        "console",
        {
            onStatus: (s) => statuses.push(s),
            onFrame: (f) => frames.push(f),
        },
        (url) => {
            const socket = new FakeSocket();
            sockets.push(socket);
            expect(url).toBe("ws://gw/channel/console");
            return socket;
        },
        async () => ({ ok: true, status: 200, json: async () => ({}) }),
        () => timeouts.push(1),
    );
    return { client, sockets, statuses, frames, timeouts };
}

describe("GatewayClient", () => {
    beforeEach(() => {
        vi.useFakeTimers();
    });

    afterEach(() => {
        vi.useRealTimers();
    });

    it("reports connected after the socket opens", () => {
        const h = makeHarness();
        h.client.connect();
        expect(h.statuses).toEqual(["connecting"]);
        h.sockets[0].onopen?.();
        expect(h.statuses).toEqual(["connecting", "connected"]);
        h.client.close();
    });

    it("sends turn frames as JSON", () => {
        const h = makeHarness();
        h.client.connect();
        h.sockets[0].onopen?.();
        expect(h.client.sendTurn("hello")).toBe(true);
        expect(JSON.parse(h.sockets[0].sent[0])).toEqual({ text: "hello" });
        h.client.close();
    });

    it("delivers parsed reply frames", () => {
        const h = makeHarness();
        h.client.connect();
        h.sockets[0].onopen?.();
        h.sockets[0].serverSends({ reply: "hi", trace_id: "t", turn: 1 });
        expect(h.frames[0].kind).toBe("reply");
        h.client.close();
    });

    it("reconnects with backoff after a drop and preserves nothing but status", () => {
        const h = makeHarness();
        h.client.connect();
        h.sockets[0].onopen?.();
        h.sockets[0].onclose?.(); // server drop
        expect(h.statuses.at(-1)).toBe("disconnected");
        vi.advanceTimersByTime(250); // first backoff step
        expect(h.sockets).toHaveLength(2);
        h.sockets[1].onopen?.();
        expect(h.statuses.at(-1)).toBe("connected");
        h.client.close();
    });

    it("backs off exponentially up to the cap", () => {
        const h = makeHarness();
        h.client.connect();
        h.sockets[0].onclose?.();
        vi.advanceTimersByTime(250);
        expect(h.sockets).toHaveLength(2);
        h.sockets[1].onclose?.();
        vi.advanceTimersByTime(499);
        expect(h.sockets).toHaveLength(2); // second step waits 500 ms
        vi.advanceTimersByTime(1);
        expect(h.sockets).toHaveLength(3);
        h.client.close();
    });

    it("stops reconnecting once closed", () => {
        const h = makeHarness();
        h.client.connect();
        h.client.close();
        vi.advanceTimersByTime(10_000);
        expect(h.sockets).toHaveLength(1); // no silent retry loop after close
    });

    it("raises a turn timeout when no reply arrives", () => {
        const h = makeHarness();
        h.client.connect();
        h.sockets[0].onopen?.();
        h.client.sendTurn("anyone there?");
        vi.advanceTimersByTime(TURN_TIMEOUT_MS);
        expect(h.timeouts).toHaveLength(1);
        h.client.close();
    });

    it("a reply clears the pending turn timer", () => {
        const h = makeHarness();
        h.client.connect();
        h.sockets[0].onopen?.();
        h.client.sendTurn("ping");
        h.sockets[0].serverSends({ reply: "pong", trace_id: "t", turn: 1 });
        vi.advanceTimersByTime(TURN_TIMEOUT_MS * 2);
        expect(h.timeouts).toHaveLength(0);
        h.client.close();
    });
});
