// Console bootstrap: wires the store, the gateway client, and the DOM.

import { GatewayClient } from "./client.js";
import {
    appendSystemNote,
    appendUserTurn,
    applyMetrics,
    applyReply,
    applySession,
    initialState,
    markTimeout,
    setStatus,
} from "./store.js";
import { render } from "./ui.js";

const METRICS_POLL_MS = 2000;

function value(id: string): string {
    return (document.getElementById(id) as HTMLInputElement).value.trim();
}

let client: GatewayClient | null = null;

function boot(): void {
    const state = initialState(value("channel") || "console");
    const paint = () => render(state);

    const connectButton = document.getElementById("connect") as HTMLButtonElement;
    connectButton.onclick = () => {
        client?.close();
        state.channelId = value("channel") || "console";
        const httpBase = value("gateway") || "http://127.0.0.1:8400";
        const wsBase = httpBase.replace(/^http/, "ws");
        client = new GatewayClient(
            wsBase,
            httpBase,
            state.channelId,
            {
                onStatus: (status) => {
                    setStatus(state, status);
                    paint();
                },
                onFrame: (inbound) => {
                    if (inbound.kind === "reply") {
                        applyReply(state, inbound.frame, Date.now());
                        if (state.sessionId !== null) {
                            client
                                ?.fetchSession(state.sessionId)
                                .then((snapshot) => {
                                    applySession(state, snapshot);
                                    paint();
                                });
                        }
                    } else if (inbound.kind === "error") {
                        appendSystemNote(state, `error: ${inbound.frame.error}`, Date.now());
                    }
                    paint();
                },
            },
            (url) => new WebSocket(url) as unknown as import("./client.js").SocketLike,
            (url, init) => fetch(url, init as RequestInit),
            () => {
                markTimeout(state, Date.now());
                paint();
            },
        );
        client.connect();
        setInterval(async () => {
            applyMetrics(state, await client!.fetchMetrics());
            paint();
        }, METRICS_POLL_MS);
    };

    const input = document.getElementById("input") as HTMLInputElement;
    const send = () => {
        const text = input.value.trim();
        if (!text || client === null) {
            return;
        }
        if (client.sendTurn(text)) {
            appendUserTurn(state, text, Date.now());
            input.value = "";
            paint();
        }
    };
    (document.getElementById("send") as HTMLButtonElement).onclick = send;
    input.onkeydown = (event) => {
        if (event.key === "Enter") {
            send();
        }
    };

    (document.getElementById("chaos-kill") as HTMLButtonElement).onclick = async () => {
        const consumer = value("chaos-consumer") || "core-2";
        const ok = await client?.postChaos({ kill_consumer: consumer });
        appendSystemNote(
            state,
            ok ? `chaos: killed consumer ${consumer}` : `chaos: kill ${consumer} failed`,
            Date.now(),
        );
        paint();
    };
    (document.getElementById("chaos-ackdrop") as HTMLButtonElement).onclick = async () => {
        const probability = parseFloat(value("chaos-prob") || "0.3");
        const ok = await client?.postChaos({ ack_drop_prob: probability });
        appendSystemNote(
            state,
            ok ? `chaos: ack drop ${probability}` : "chaos: ack-drop toggle failed",
            Date.now(),
        );
        state.chaos.ackDropProb = ok ? probability : state.chaos.ackDropProb;
        paint();
    };
    (document.getElementById("chaos-datanode") as HTMLButtonElement).onclick = async () => {
        const node = value("chaos-node") || "dn-0";
        const ok = await client?.postChaos({ kill_datanode: node });
        appendSystemNote(
            state,
            ok ? `chaos: killed datanode ${node}` : `chaos: kill ${node} failed`,
            Date.now(),
        );
        paint();
    };
    paint();
}

window.addEventListener("DOMContentLoaded", boot);
