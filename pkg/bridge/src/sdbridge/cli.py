"""Bridge CLI.

``sdbridge run --config bridge.cfg`` drives a full dual-branch run against
a live engine.  The config mirrors the engine's session keys and adds the
bridge-specific ones (engine address, layer maps, prompt/subject).  With
``pipeline = fake`` the built-in deterministic pipeline is used, which is
the only pipeline shipped here; a real model adapter plugs in by providing
the same processor/tap surface.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .bridge import BridgeConfig, BridgeError, EngineBridge
from .fake import FakeCond, FakePipeline
from .frames import encode_array
from .protocol import EngineError

_INT_KEYS = {"engine_port", "total_steps", "ama_step_start", "ama_step_end",
             "pca_dim", "seed", "pipeline_seed", "ref_seed"}
_FLOAT_KEYS = {"lambda_c", "lambda_g", "cfg_scale", "mask_threshold",
               "subject_size", "ref_subject_y", "ref_subject_x",
               "tgt_subject_y", "tgt_subject_x"}
_STR_KEYS = {"model_id", "subject_token", "prompt", "engine_host", "pipeline",
             "attn_map", "feature_map"}


def parse_bridge_config(text: str, source: str) -> dict:
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise BridgeError(f"{source}:{lineno}: expected 'key = value'")
        key, _, raw = stripped.partition("=")
        key, raw = key.strip(), raw.strip()
        if key in _INT_KEYS:
            values[key] = int(raw)
        elif key in _FLOAT_KEYS:
            values[key] = float(raw)
        elif key in _STR_KEYS:
            values[key] = raw
        else:
            raise BridgeError(f"{source}:{lineno}: unknown key {key!r}")
    return values


def parse_layer_map(raw: str) -> dict[str, int]:
    out = {}
    for item in raw.split(","):
        item = item.strip()
        if not item:
            continue
        name, _, idx = item.rpartition(":")
        if not name:
            raise BridgeError(f"bad layer map entry {item!r}; want name:index")
        out[name] = int(idx)
    return out


def build_config(values: dict) -> BridgeConfig:
    return BridgeConfig(
        model_id=values.get("model_id", "fake"),
        subject_token=values.get("subject_token", "<subject>"),
        prompt=values.get("prompt", "a <subject> rendition"),
        engine_host=values.get("engine_host", "127.0.0.1"),
        engine_port=values.get("engine_port", 7433),
        attn_layer_map=parse_layer_map(
            values.get("attn_map",
                       "up_blocks.1.attn:1,up_blocks.2.attn:2,up_blocks.3.attn:3")
        ),
        feature_layer_map=parse_layer_map(
            values.get("feature_map", "up_blocks.1.res:2,up_blocks.2.res:3")
        ),
        total_steps=values.get("total_steps", 10),
        ama_step_start=values.get("ama_step_start", 2),
        ama_step_end=values.get("ama_step_end", values.get("total_steps", 10)),
        lambda_c=values.get("lambda_c", 0.4),
        lambda_g=values.get("lambda_g", 25.0),
        cfg_scale=values.get("cfg_scale", 4.0),
        pca_dim=values.get("pca_dim", 24),
        mask_threshold=values.get("mask_threshold", 0.5),
        seed=values.get("seed", 0),
    )


def cmd_run(args: argparse.Namespace) -> int:
    path = Path(args.config)
    if not path.exists():
        print(f"error: config file not found: {path}", file=sys.stderr)
        return 2
    try:
        values = parse_bridge_config(path.read_text(encoding="utf-8"), str(path))
        config = build_config(values)
        pipeline_kind = values.get("pipeline", "fake")
        if pipeline_kind != "fake":
            raise BridgeError(f"unknown pipeline {pipeline_kind!r}; only 'fake' ships here")

        def factory():
            return FakePipeline(
                seed=values.get("pipeline_seed", 0),
                total_steps=config.total_steps,
            )

        bridge = EngineBridge(config, factory)
    except BridgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    size = values.get("subject_size", 0.35)
    subject = values.get("subject_token", "<subject>")
    ref = bridge.pipeline.register_cond(FakeCond(
        name="ref", subject_id=subject,
        center=(values.get("ref_subject_y", 0.35), values.get("ref_subject_x", 0.4)),
        size=size,
    ))
    tgt = bridge.pipeline.register_cond(FakeCond(
        name="tgt", subject_id=subject,
        center=(values.get("tgt_subject_y", 0.6), values.get("tgt_subject_x", 0.55)),
        size=size,
    ))
    bridge.set_conditions(ref, tgt, bridge.pipeline.null_cond)

    rng = np.random.default_rng(values.get("ref_seed", 77))
    ref_latent = rng.standard_normal(bridge.pipeline.latent_shape)
    try:
        bridge.connect(ref_latent)
    except (OSError, EngineError) as exc:
        print(f"error: cannot reach engine at "
              f"{config.engine_host}:{config.engine_port}: {exc}", file=sys.stderr)
        return 3
    result = bridge.run(ref_latent)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "final_latent.dmt").write_bytes(encode_array(result["final_latent"]))
    (out / "final_ref_latent.dmt").write_bytes(encode_array(result["final_ref_latent"]))
    mode = "degraded to baseline" if result["engine_down"] else "engine-assisted"
    print(
        f"bridge run done ({mode}): {result['steps']} steps, "
        f"ref reconstruction max-abs {result['ref_recon_max_err']:.3e}, outputs in {out}"
    )
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="sdbridge",
        description="Drive a diffusion pipeline with engine-side semantic matching.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run the bridge loop against an engine")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", default="bridge_out")
    p_run.set_defaults(func=cmd_run)
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
