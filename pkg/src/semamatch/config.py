"""Flat key-value session config files.

Format: one ``key = value`` per line, ``#`` starts a comment, blank lines
ignored.  Unknown keys are hard errors with the offending line number;
misspelled hyperparameters silently changing results is the failure mode
this format exists to prevent.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .backend import SubjectCond, SyntheticBackend, SyntheticBackendSpec
from .sampler import SessionConfig, SessionError


class ConfigError(ValueError):
    """Config file problem; message carries file and line context."""


def _parse_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {raw!r}")


def _parse_int_tuple(raw: str) -> tuple[int, ...]:
    items = [s for s in raw.replace(",", " ").split() if s]
    return tuple(int(s) for s in items)


@dataclass
class SessionFileConfig:
    """Everything a `run` invocation needs: session, backend and subjects."""

    session: SessionConfig
    backend_spec: SyntheticBackendSpec
    ref_subject: SubjectCond
    tgt_subject: SubjectCond
    ref_seed: int = 77

    def build_backend(self) -> SyntheticBackend:
        return SyntheticBackend(self.backend_spec)


_SESSION_KEYS = {
    "total_steps": int,
    "ama_step_start": int,
    "ama_step_end": int,
    "ama_layers": _parse_int_tuple,
    "descriptor_layers": _parse_int_tuple,
    "lambda_c": float,
    "lambda_g": float,
    "cfg_scale": float,
    "pca_dim": int,
    "seed": int,
    "mask_threshold": float,
    "alpha_final": float,
    "invert_refine_steps": int,
    "collect_diagnostics": _parse_bool,
    "collect_attention": _parse_bool,
}

_BACKEND_KEYS = {
    "backend_seed": int,
    "latent_height": int,
    "latent_width": int,
    "latent_channels": int,
    "eps_gain": float,
    "subject_amplitude": float,
    "projection_gain": float,
}

_SUBJECT_KEYS = {
    "subject_id": str,
    "ref_subject_y": float,
    "ref_subject_x": float,
    "tgt_subject_y": float,
    "tgt_subject_x": float,
    "subject_size": float,
    "ref_seed": int,
}

_ALL_KEYS = {**_SESSION_KEYS, **_BACKEND_KEYS, **_SUBJECT_KEYS}


def parse_config_text(text: str, source: str = "<config>") -> SessionFileConfig:
    values: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, _, raw = stripped.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in _ALL_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = _ALL_KEYS[key](raw)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from exc

    session_kwargs: dict[str, object] = {}
    for key in _SESSION_KEYS:
        if key in ("ama_step_start", "ama_step_end"):
            continue
        if key in values:
            session_kwargs[key] = values[key]
    defaults = SessionConfig()
    lo = values.get("ama_step_start", defaults.ama_step_range[0])
    hi = values.get("ama_step_end", defaults.ama_step_range[1])
    total = values.get("total_steps", defaults.total_steps)
    if "ama_step_end" not in values and "total_steps" in values:
        hi = min(hi, total)
    session_kwargs["ama_step_range"] = (lo, hi)
    try:
        session = SessionConfig(**session_kwargs)  # type: ignore[arg-type]
    except SessionError as exc:
        raise ConfigError(f"{source}: {exc}") from exc

    backend_kwargs: dict[str, object] = {"total_steps": session.total_steps}
    for key in _BACKEND_KEYS:
        if key in values:
            target = "seed" if key == "backend_seed" else key
            backend_kwargs[target] = values[key]
    try:
        backend_spec = SyntheticBackendSpec(**backend_kwargs)  # type: ignore[arg-type]
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from exc

    subject_id = str(values.get("subject_id", "subject"))
    size = float(values.get("subject_size", 0.3))
    ref_subject = SubjectCond(
        name="reference",
        subject_id=subject_id,
        center=(
            float(values.get("ref_subject_y", 0.35)),
            float(values.get("ref_subject_x", 0.35)),
        ),
        size=size,
    )
    tgt_subject = SubjectCond(
        name="target",
        subject_id=subject_id,
        center=(
            float(values.get("tgt_subject_y", 0.6)),
            float(values.get("tgt_subject_x", 0.6)),
        ),
        size=size,
    )
    return SessionFileConfig(
        session=session,
        backend_spec=backend_spec,
        ref_subject=ref_subject,
        tgt_subject=tgt_subject,
        ref_seed=int(values.get("ref_seed", 77)),
    )


def load_config(path: str | Path) -> SessionFileConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"), source=str(path))
