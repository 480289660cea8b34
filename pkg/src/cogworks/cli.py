"""Command line entry points: scenario runner, gateway server, chat client."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from .harness import ChaosSpec, Scenario, run_scenario
from .platform import Platform, PlatformConfig


@click.group()
def main() -> None:
    """Conversational control plane for simulated production machines."""


@main.command()
@click.argument("scenario_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", default=0, show_default=True, help="Seed for ids and chaos RNG.")
@click.option("--ack-drop", type=float, default=None, help="Override ack-drop probability.")
@click.option("--kill-consumer", type=int, default=None, help="Kill a core consumer before this step.")
@click.option("--kill-datanode", type=int, default=None, help="Kill a datanode before this step.")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Write the transcript JSON here.")
def run(scenario_path, seed, ack_drop, kill_consumer, kill_datanode, out) -> None:
    """Replay a scripted scenario end to end and print the transcript."""
    scenario = Scenario.load(scenario_path)
    chaos = scenario.chaos
    if ack_drop is not None or kill_consumer is not None or kill_datanode is not None:
        chaos = ChaosSpec(
            ack_drop_prob=ack_drop if ack_drop is not None else chaos.ack_drop_prob,
            kill_consumer_at_step=(
                kill_consumer if kill_consumer is not None else chaos.kill_consumer_at_step
            ),
            kill_consumer=chaos.kill_consumer,
            kill_datanode_at_step=(
                kill_datanode if kill_datanode is not None else chaos.kill_datanode_at_step
            ),
            kill_datanode=chaos.kill_datanode,
        )
    transcript = run_scenario(scenario, seed=seed, chaos_override=chaos, out=out)
    for step in transcript["steps"]:
        marker = "ok " if step["matched"] else "FAIL"
        click.echo(f"[{marker}] step {step['step']} {step['intent'] or '-':<12} -> {step['reply']}")
    metrics = transcript["metrics"]
    click.echo(
        "messages: published={published} delivered={delivered} redelivered={redelivered} "
        "dead={dead_lettered}; journal lines={journal}".format(
            **metrics["broker"], journal=metrics["journal_lines"]
        )
    )
    if out:
        click.echo(f"transcript written to {out}")
    sys.exit(0 if transcript["ok"] else 1)


@main.command()
@click.option("--bind", default="127.0.0.1:8400", show_default=True, help="HOST:PORT to listen on.")
@click.option("--machine", "machine_path", type=click.Path(exists=True), default=None, help="Machine config JSON.")
@click.option("--directory", "directory_path", type=click.Path(exists=True), default=None, help="Principal directory JSON.")
@click.option("--data-dir", type=click.Path(file_okay=False), default=None, help="Block store root (default: temp dir).")
@click.option("--seed", default=0, show_default=True)
def serve(bind, machine_path, directory_path, data_dir, seed) -> None:
    """Boot the platform and serve the gateway (WebSocket + HTTP)."""
    from .service.gateway import serve as serve_gateway

    config = PlatformConfig(seed=seed)
    if machine_path:
        config.machine = json.loads(Path(machine_path).read_text())
    if directory_path:
        config.directory = json.loads(Path(directory_path).read_text())
    if data_dir:
        config.blockstore_root = data_dir
    host, _, port = bind.rpartition(":")
    platform = Platform(config).boot()
    try:
        serve_gateway(platform, host=host or "127.0.0.1", port=int(port))
    finally:
        platform.shutdown()


@main.command()
@click.option("--url", default="ws://127.0.0.1:8400", show_default=True, help="Gateway base URL.")
@click.option("--channel", default="console", show_default=True)
@click.option("--modality", default="text", show_default=True, type=click.Choice(["text", "voice", "api"]))
def chat(url, channel, modality) -> None:
    """Interactive thin client against a running gateway."""
    from websockets.sync.client import connect

    endpoint = f"{url}/channel/{channel}?modality={modality}"
    click.echo(f"connected to {endpoint} (ctrl-d to quit)")
    with connect(endpoint) as ws:
        while True:
            try:
                line = input("> ").strip()
            except EOFError:
                break
            if not line:
                continue
            ws.send(json.dumps({"text": line}))
            frame = json.loads(ws.recv())
            if "error" in frame:
                click.echo(f"! {frame['error']}")
            else:
                click.echo(frame["reply"])


if __name__ == "__main__":
    main()
