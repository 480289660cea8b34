import { describe, expect, it } from "vitest";

import { classifyOrderReply, parseFrame } from "../src/protocol.js";

describe("parseFrame", () => {
    it("parses a reply frame", () => {
        const raw = JSON.stringify({
            reply: 'simulated-speech:"Welcome, operator1."',
            text: "Welcome, operator1.",
            session: "session-1",
            modality: "voice",
            trace_id: "trace-1",
            turn: 1,
        });
        const inbound = parseFrame(raw);
        expect(inbound.kind).toBe("reply");
        if (inbound.kind === "reply") {
            expect(inbound.frame.turn).toBe(1);
            expect(inbound.frame.session).toBe("session-1");
        }
    });

    it("parses an error frame", () => {
        const inbound = parseFrame(JSON.stringify({ error: "rate limited" }));
        expect(inbound).toEqual({ kind: "error", frame: { error: "rate limited" } });
    });

    it("flags invalid payloads", () => {
        expect(parseFrame("not json").kind).toBe("invalid");
        expect(parseFrame('{"weird": true}').kind).toBe("invalid");
    });
});

describe("classifyOrderReply", () => {
    it("detects accepted orders", () => {
        const outcome = classifyOrderReply(
            "Work order order-ab12 accepted: 2300 units within 168 hours.",
        );
        expect(outcome).toEqual({ status: "accepted", reason: null });
    });

    it("detects rejection with reason", () => {
        const outcome = classifyOrderReply(
            "Work order rejected: NON_DISPATCHABLE (requested 2300, capacity 1680).",
        );
        expect(outcome).toEqual({ status: "rejected", reason: "NON_DISPATCHABLE" });
    });

    it("ignores other replies", () => {
        expect(classifyOrderReply("OEE is 0.84645")).toBeNull();
        expect(classifyOrderReply("Welcome, operator1.")).toBeNull();
    });
});
