"""Command-line surface.

Subcommands: ``run`` (full synthetic session), ``match`` (standalone
matching between two descriptor frames), ``warp`` (resample a grid along a
flow), ``inspect`` (render frame dumps to PGM/PPM), ``serve`` (wire-protocol
endpoint) and ``report`` (figures + CSV from a diagnostics tree).

Exit codes: 0 success, 2 configuration/usage error, 3 backend or session
failure.  ``SEMAMATCH_WORKERS`` sets the default worker count for
cost-volume assembly.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import frames, images, report, wire
from .backend import BackendError
from .config import ConfigError, load_config
from .consistency import ConsistencyParams, cycle_confidence
from .grids import FlowField, GridError, MaskGrid, TensorGrid
from .matching import DescriptorPair, MatchingError, argmax_flow, cost_volume, warp
from .sampler import SessionError, SessionResult, run_dual_branch

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_BACKEND = 3


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _write_diagnostics(result: SessionResult, out_dir: Path) -> None:
    steps_dir = out_dir / "steps"
    for rec in result.steps:
        if rec.match is None:
            continue
        step_dir = steps_dir / str(rec.step)
        step_dir.mkdir(parents=True, exist_ok=True)
        frames.write_frame(step_dir / "flow.dmt", rec.match.flow_xy)
        images.write_pgm(step_dir / "mask_m.pgm", images.mask_to_pgm(rec.match.mask_m))
        images.write_pgm(step_dir / "mask_u.pgm", images.mask_to_pgm(rec.match.mask_u))
        images.write_pgm(
            step_dir / "mask_mprime.pgm", images.mask_to_pgm(rec.match.mask_mprime)
        )
        images.write_ppm(
            step_dir / "pca_ref.ppm", images.pca_color_map(rec.match.pair.psi_ref)
        )
        images.write_ppm(
            step_dir / "pca_tgt.ppm", images.pca_color_map(rec.match.pair.psi_tgt)
        )


def cmd_run(args: argparse.Namespace) -> int:
    try:
        file_cfg = load_config(args.config)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, str(exc))

    session = file_cfg.session
    if args.seed is not None:
        from dataclasses import replace

        session = replace(session, seed=args.seed)
    if args.baseline:
        session = session.gate_off()
    if args.diagnostics:
        from dataclasses import replace

        session = replace(session, collect_diagnostics=True)

    out_dir = Path(args.out)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        return _fail(EXIT_CONFIG, f"cannot create output directory {out_dir}: {exc}")

    try:
        backend = file_cfg.build_backend()
        ref_cond = backend.register_cond(file_cfg.ref_subject)
        tgt_cond = backend.register_cond(file_cfg.tgt_subject)
        rng = np.random.default_rng(file_cfg.ref_seed)
        ref_z0 = TensorGrid(rng.standard_normal(backend.spec.latent_shape))
        result = run_dual_branch(backend, session, ref_z0, ref_cond, tgt_cond)
    except (SessionError, BackendError) as exc:
        return _fail(EXIT_BACKEND, str(exc))

    frames.write_frame(out_dir / "final_latent.dmt", result.final_latent_tgt)
    frames.write_frame(out_dir / "final_ref_latent.dmt", result.final_latent_ref)
    report.write_energy_log(out_dir / report.ENERGY_LOG, result.energy_rows())
    if session.collect_diagnostics:
        _write_diagnostics(result, out_dir)
    print(
        f"session done: {session.total_steps} steps, "
        f"ref reconstruction max-abs {result.ref_recon_max_err:.3e}, "
        f"outputs in {out_dir}"
    )
    return EXIT_OK


def _load_descriptor(path: str) -> TensorGrid:
    try:
        arr = frames.read_frame(path)
    except (OSError, frames.FrameError) as exc:
        raise ConfigError(f"cannot read frame {path}: {exc}") from exc
    if arr.ndim != 3:
        raise ConfigError(f"{path}: expected a rank-3 descriptor frame, got rank {arr.ndim}")
    return TensorGrid(arr.astype(np.float64))


def cmd_match(args: argparse.Namespace) -> int:
    try:
        psi_ref = _load_descriptor(args.ref)
        psi_tgt = _load_descriptor(args.tgt)
        if psi_ref.shape != psi_tgt.shape:
            raise ConfigError(
                f"descriptor shapes disagree: {psi_ref.shape} vs {psi_tgt.shape}"
            )
        mask = MaskGrid.full(psi_ref.height, psi_ref.width)
        if args.mask:
            mask = frames.decode_mask(Path(args.mask).read_bytes())
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, str(exc))
    except (OSError, frames.FrameError) as exc:
        return _fail(EXIT_CONFIG, str(exc))

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        pair = DescriptorPair(psi_ref=psi_ref, psi_tgt=psi_tgt,
                              basis=np.eye(psi_ref.channels), mean=np.zeros(psi_ref.channels))
        volume = cost_volume(pair)
        flow_xy = argmax_flow(volume, "x_to_y")
        flow_yx = argmax_flow(volume, "y_to_x")
        params = ConsistencyParams(lambda_c=args.lambda_c)
        confidence = cycle_confidence(flow_xy, flow_yx, mask, params)
    except (MatchingError, GridError, ValueError) as exc:
        return _fail(EXIT_BACKEND, str(exc))

    frames.write_frame(out_dir / "flow_xy.dmt", flow_xy)
    frames.write_frame(out_dir / "flow_yx.dmt", flow_yx)
    images.write_pgm(out_dir / "confidence.pgm", images.mask_to_pgm(confidence))

    mean_cost_max = float(volume.values.max(axis=0).mean())
    confident_ratio = confidence.foreground_area() / (confidence.height * confidence.width)
    stats_path = out_dir / "stats.tsv"
    with open(stats_path, "w", encoding="utf-8") as fh:
        fh.write("mean_cost_max\tconfident_ratio\n")
        fh.write(f"{mean_cost_max:.8g}\t{confident_ratio:.8g}\n")
    print(f"mean cost max {mean_cost_max:.4f}, confident pixels {confident_ratio:.1%}")
    return EXIT_OK


def cmd_warp(args: argparse.Namespace) -> int:
    try:
        grid = _load_descriptor(args.grid)
        flow = frames.decode_flow(Path(args.flow).read_bytes())
        warped = warp(grid, flow)
    except (ConfigError, frames.FrameError, GridError, OSError) as exc:
        return _fail(EXIT_CONFIG, str(exc))
    frames.write_frame(args.out, warped)
    print(f"warped grid written to {args.out}")
    return EXIT_OK


def _render_frame(path: Path, out_dir: Path, ref: TensorGrid | None) -> list[Path]:
    arr = frames.read_frame(path)
    created: list[Path] = []
    if arr.ndim != 3:
        return created
    stem = path.stem
    if arr.shape[2] == 1:
        values = arr[:, :, 0].astype(np.float64)
        target = out_dir / f"{stem}.pgm"
        if np.all((values == 0.0) | (values == 1.0)):
            images.write_pgm(target, (values * 255).astype(np.uint8))
        else:
            images.write_pgm(target, images.grid_to_pgm(TensorGrid(arr.astype(np.float64))))
        created.append(target)
    elif arr.shape[2] == 2:
        flow = FlowField(arr.astype(np.float64))
        magnitude = np.linalg.norm(flow.displacement, axis=2)[:, :, None]
        target = out_dir / f"{stem}_magnitude.pgm"
        images.write_pgm(target, images.grid_to_pgm(TensorGrid(magnitude)))
        created.append(target)
        if ref is not None and (ref.height, ref.width) == (flow.height, flow.width):
            preview = warp(ref, flow)
            target = out_dir / f"{stem}_warped_preview.ppm"
            images.write_ppm(target, images.pca_color_map(preview))
            created.append(target)
    else:
        target = out_dir / f"{stem}.ppm"
        images.write_ppm(target, images.pca_color_map(TensorGrid(arr.astype(np.float64))))
        created.append(target)
    return created


def cmd_inspect(args: argparse.Namespace) -> int:
    root = Path(args.dir)
    if not root.is_dir():
        return _fail(EXIT_CONFIG, f"not a directory: {root}")
    frame_paths = sorted(root.rglob("*.dmt"))
    if not frame_paths:
        return _fail(EXIT_CONFIG, f"no frame dumps found under {root}")
    ref = None
    if args.ref:
        try:
            ref = _load_descriptor(args.ref)
        except ConfigError as exc:
            return _fail(EXIT_CONFIG, str(exc))
    out_dir = Path(args.out) if args.out else root
    created = []
    for path in frame_paths:
        target_dir = out_dir / path.parent.relative_to(root)
        target_dir.mkdir(parents=True, exist_ok=True)
        try:
            created.extend(_render_frame(path, target_dir, ref))
        except (frames.FrameError, GridError, ValueError) as exc:
            return _fail(EXIT_BACKEND, f"{path}: {exc}")
    print(f"rendered {len(created)} images under {out_dir}")
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    host, _, port = args.address.rpartition(":")
    try:
        server = wire.EngineServer((host or "127.0.0.1", int(port)))
    except (OSError, ValueError) as exc:
        return _fail(EXIT_CONFIG, f"cannot listen on {args.address}: {exc}")
    print(f"listening on {server.server_address[0]}:{server.port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
        server.server_close()
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    diag_dir = Path(args.diagnostics)
    if not (diag_dir / report.ENERGY_LOG).exists():
        return _fail(EXIT_CONFIG, f"no {report.ENERGY_LOG} under {diag_dir}")
    try:
        created = report.render_report(diag_dir, Path(args.out))
    except (ValueError, OSError) as exc:
        return _fail(EXIT_BACKEND, str(exc))
    print("wrote:")
    for path in created:
        print(f"  {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semamatch",
        description="Semantic appearance matching engine (synthetic sessions, "
        "standalone matching, wire-protocol service).",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a synthetic dual-branch session")
    p_run.add_argument("--config", required=True, help="session config file")
    p_run.add_argument("--out", default="out", help="output directory")
    p_run.add_argument("--seed", type=int, default=None, help="override target seed")
    p_run.add_argument("--baseline", action="store_true",
                       help="disable matched attention and guidance")
    p_run.add_argument("--diagnostics", action="store_true",
                       help="write per-step flow/mask/descriptor dumps")
    p_run.set_defaults(func=cmd_run)

    p_match = sub.add_parser("match", help="match two descriptor frame files")
    p_match.add_argument("ref", help="reference descriptor frame (.dmt)")
    p_match.add_argument("tgt", help="target descriptor frame (.dmt)")
    p_match.add_argument("--out", default="match_out", help="output directory")
    p_match.add_argument("--lambda-c", type=float, default=0.4, dest="lambda_c")
    p_match.add_argument("--mask", default=None, help="foreground mask frame (.dmt)")
    p_match.set_defaults(func=cmd_match)

    p_warp = sub.add_parser("warp", help="backward-warp a grid along a flow")
    p_warp.add_argument("grid", help="grid frame (.dmt)")
    p_warp.add_argument("flow", help="flow frame (.dmt)")
    p_warp.add_argument("--out", default="warped.dmt", help="output frame path")
    p_warp.set_defaults(func=cmd_warp)

    p_inspect = sub.add_parser("inspect", help="render frame dumps to PGM/PPM")
    p_inspect.add_argument("dir", help="diagnostics directory")
    p_inspect.add_argument("--out", default=None, help="image output directory")
    p_inspect.add_argument("--ref", default=None,
                           help="reference grid frame for warped previews")
    p_inspect.set_defaults(func=cmd_inspect)

    p_serve = sub.add_parser("serve", help="serve the wire protocol")
    p_serve.add_argument("--address", default="127.0.0.1:7433", help="host:port")
    p_serve.set_defaults(func=cmd_serve)

    p_report = sub.add_parser("report", help="figures + CSV from diagnostics")
    p_report.add_argument("--diagnostics", required=True, help="diagnostics directory")
    p_report.add_argument("--out", default="report_out", help="report output directory")
    p_report.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
