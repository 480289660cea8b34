// DOM rendering: pure function of the console state.

import { ConsoleState } from "./store.js";

function esc(text: string): string {
    const div = document.createElement("div");
    div.textContent = text;
    return div.innerHTML;
}

export function render(state: ConsoleState, root: Document = document): void {
    const status = root.getElementById("status");
    if (status) {
        status.textContent = state.status;
        status.className = `pill status-${state.status}`;
    }
    const auth = root.getElementById("auth-badge");
    if (auth) {
        auth.textContent = state.authenticated ? "authenticated" : "not authenticated";
        auth.className = `pill ${state.authenticated ? "auth-on" : "auth-off"}`;
    }
    const order = root.getElementById("order-badge");
    if (order) {
        if (state.lastOrder === null) {
            order.textContent = "";
            order.className = "pill hidden";
        } else {
            order.textContent =
                state.lastOrder.status === "accepted"
                    ? "order accepted"
                    : `order rejected: ${state.lastOrder.reason ?? "?"}`;
            order.className = `pill order-${state.lastOrder.status}`;
        }
    }
    const log = root.getElementById("log");
    if (log) {
        log.innerHTML = state.log
            .map((entry) => {
                const turn = entry.turn !== null ? ` <span class="turn">#${entry.turn}</span>` : "";
                return `<div class="bubble ${entry.kind}">${esc(entry.text)}${turn}</div>`;
            })
            .join("");
        log.scrollTop = log.scrollHeight;
    }
    renderMetrics(state, root);
    renderSession(state, root);
    const violations = root.getElementById("violations");
    if (violations) {
        violations.textContent = state.invariantViolations.length
            ? `invariant violations: ${state.invariantViolations.join("; ")}`
            : "";
    }
}

function renderMetrics(state: ConsoleState, root: Document): void {
    const panel = root.getElementById("metrics");
    if (!panel) {
        return;
    }
    if (state.metrics === null) {
        panel.innerHTML = '<em>no metrics yet</em>';
        return;
    }
    const broker = state.metrics.broker;
    const stale = state.metricsStale ? ' <span class="stale">(stale)</span>' : "";
    const rows = Object.entries(state.metrics.benchmarks)
        .map(
            ([name, b]) =>
                `<tr><td>${esc(name)}</td><td>${b.count}</td>` +
                `<td>${(b.p50 * 1000).toFixed(1)}</td><td>${(b.p95 * 1000).toFixed(1)}</td>` +
                `<td>${(b.error_rate * 100).toFixed(0)}%</td></tr>`,
        )
        .join("");
    panel.innerHTML =
        `<div>published ${broker.published} &middot; delivered ${broker.delivered} &middot; ` +
        `redelivered <b>${broker.redelivered}</b> &middot; dead <b>${broker.dead_lettered}</b>${stale}</div>` +
        `<table><tr><th>function</th><th>n</th><th>p50 ms</th><th>p95 ms</th><th>err</th></tr>${rows}</table>`;
}

function renderSession(state: ConsoleState, root: Document): void {
    const panel = root.getElementById("session");
    if (!panel) {
        return;
    }
    if (state.session === null) {
        panel.innerHTML = "<em>no session yet</em>";
        return;
    }
    const s = state.session;
    const stale = state.sessionStale ? ' <span class="stale">(stale)</span>' : "";
    const vars = Object.entries(s.state_vars)
        .map(([k, v]) => `<tr><td>${esc(k)}</td><td>${esc(JSON.stringify(v))}</td></tr>`)
        .join("");
    panel.innerHTML =
        `<div>${esc(s.session_id)} &middot; ${esc(s.principal ?? "anonymous")} &middot; ` +
        `${esc(s.status)}${stale}</div>` +
        `<div>intent ${esc(s.context.active_intent ?? "-")}</div>` +
        `<table>${vars || "<tr><td><em>no state vars</em></td></tr>"}</table>`;
}
