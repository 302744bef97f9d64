"""Command-line front end.

Exit codes: 0 success, 1 invalid configuration or unsupported audio format,
2 file I/O failure, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import torch

from .audio import AudioFormatError, read_wav, write_wav
from .harness import run_benchmark, write_report_csv
from .objective import CompressionConfig, RegularizerSchedule
from .operator import OperatorConfig, apply_projection, assemble_rir, impulse_response
from .optim import NonFiniteGradient, RirOptConfig
from .prior import ExternalScoreModel, GaussianPrior, ProtocolError
from .sampler import SamplerConfig, SamplerError, build_schedule, run_blind_inference, run_informed_inference
from .signal import SizingError
from .wpe import WpeConfig, wpe_dereverb

log = logging.getLogger("blindderev")

SCHEMA = "blindderev.diagnostics/1"
MODES = ("blind", "informed", "wpe", "benchmark")
EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 1, 2, 3


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Every tunable of a run. The JSON config file mirrors this tree."""

    mode: str = "blind"
    seed: int = 0
    input: Optional[str] = None
    output: Optional[str] = None
    rir_in: Optional[str] = None
    rir_out: Optional[str] = None
    report: Optional[str] = None
    score_model: str = "gaussian"
    sample_rate: int = 16000
    gaussian: dict = field(default_factory=lambda: {"mean": 0.0, "std": 0.05})
    schedule: dict = field(default_factory=lambda: {"t_max": 0.5, "t_min": 1e-4, "n_steps": 200, "rho": 10.0})
    sampler: dict = field(default_factory=dict)
    operator: dict = field(default_factory=dict)
    optim: dict = field(default_factory=dict)
    regularizer: dict = field(default_factory=dict)
    compression: dict = field(default_factory=dict)
    wpe: dict = field(default_factory=dict)
    benchmark: dict = field(default_factory=lambda: {"mode": "wpe", "synthesis": "direct"})

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.input is None:
            raise ConfigError("--in is required")
        if self.mode != "benchmark" and self.output is None:
            raise ConfigError("--out is required")
        if self.mode == "informed" and self.rir_in is None:
            raise ConfigError("informed mode needs --rir-in")
        if not (self.score_model == "gaussian" or self.score_model.startswith("external:")):
            raise ConfigError("--score-model must be 'gaussian' or 'external:<command>'")
        if self.gaussian.get("std", 1.0) <= 0:
            raise ConfigError("gaussian.std must be positive")
        # Building every module config runs its own checks.
        self.build()

    def build(self) -> dict:
        try:
            op = OperatorConfig(sample_rate=self.sample_rate, **self.operator)
            optim = dict(self.optim)
            for key in ("weight_db_range", "decay_range"):
                if key in optim:
                    optim[key] = tuple(optim[key])
            opt = RirOptConfig(regularizer=RegularizerSchedule(**self.regularizer), **optim)
            opt.make_state()
            sampler = SamplerConfig(schedule=build_schedule(**self.schedule), seed=self.seed, **self.sampler)
            return {
                "op": op,
                "opt": opt,
                "sampler": sampler,
                "comp": CompressionConfig(**self.compression),
                "wpe": WpeConfig(**self.wpe),
            }
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def load_config(path: Optional[str], overrides: dict) -> RunConfig:
    data = {}
    if path is not None:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
    names = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = RunConfig(**data)
    for key, value in overrides.items():
        if value is None:
            continue
        if key == "steps":
            cfg.schedule = {**cfg.schedule, "n_steps": value}
        elif key == "inner_its":
            cfg.optim = {**cfg.optim, "n_its": value}
        else:
            setattr(cfg, key, value)
    return cfg


def _score_model(cfg: RunConfig):
    if cfg.score_model == "gaussian":
        return GaussianPrior(float(cfg.gaussian.get("mean", 0.0)), float(cfg.gaussian.get("std", 0.05)) ** 2)
    return ExternalScoreModel(cfg.score_model[len("external:") :])


def _jsonable(obj):
    if isinstance(obj, float) and obj == float("inf"):
        return "inf"
    if dataclasses.is_dataclass(obj):
        return {k: _jsonable(v) for k, v in dataclasses.asdict(obj).items()}
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _write_report(cfg: RunConfig, body: dict) -> None:
    if cfg.report is None:
        return
    doc = {"schema": SCHEMA, "mode": cfg.mode, "seed": cfg.seed, "config": _jsonable(cfg), **body}
    with open(cfg.report, "w") as fh:
        json.dump(doc, fh, indent=1)


def execute(cfg: RunConfig) -> None:
    parts = cfg.build()
    torch.manual_seed(cfg.seed)
    if cfg.mode == "benchmark":
        model = _score_model(cfg) if cfg.benchmark.get("mode", "wpe") != "wpe" else None
        try:
            rows = run_benchmark(
                cfg.input,
                cfg.benchmark.get("mode", "wpe"),
                model,
                parts["sampler"],
                parts["op"],
                parts["opt"],
                parts["comp"],
                parts["wpe"],
                synthesis=cfg.benchmark.get("synthesis", "direct"),
                seed=cfg.seed,
                sample_rate=cfg.sample_rate,
            )
        finally:
            if model is not None:
                model.close()
        if cfg.output:
            write_report_csv(rows, cfg.output)
        ok = [r for r in rows if not r.error]
        agg = {}
        if ok:
            agg = {
                "lsd_improvement_db": sum(r.unprocessed.lsd_db - r.processed.lsd_db for r in ok) / len(ok),
                "si_sdr_improvement_db": sum(r.processed.si_sdr_db - r.unprocessed.si_sdr_db for r in ok) / len(ok),
            }
        _write_report(cfg, {"items": _jsonable(rows), "aggregate": agg})
        return

    y = read_wav(cfg.input, cfg.sample_rate)
    if cfg.mode == "wpe":
        write_wav(cfg.output, wpe_dereverb(y, parts["wpe"]), cfg.sample_rate)
        _write_report(cfg, {})
        return

    h = read_wav(cfg.rir_in, cfg.sample_rate) if cfg.mode == "informed" else None
    model = _score_model(cfg)
    try:
        if cfg.mode == "informed":
            res = run_informed_inference(y, h, model, parts["sampler"], parts["op"], parts["comp"], parts["wpe"])
        else:
            res = run_blind_inference(y, model, parts["sampler"], parts["op"], parts["opt"], parts["comp"], parts["wpe"])
    finally:
        model.close()
    write_wav(cfg.output, res.x0, cfg.sample_rate)
    body = {
        "jacobian": res.jacobian,
        "initial_cost": res.initial_cost,
        "final_cost": res.final_cost,
        "steps": res.diagnostics,
    }
    if res.psi is not None:
        body["final_params"] = {"weights_db": res.psi.weights_db.tolist(), "decays": res.psi.decays.tolist()}
        if cfg.rir_out:
            op = parts["op"]
            write_wav(cfg.rir_out, impulse_response(apply_projection(assemble_rir(res.psi, op), op), op), cfg.sample_rate)
    elif cfg.rir_out:
        write_wav(cfg.rir_out, h, cfg.sample_rate)
    _write_report(cfg, body)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="blindderev", description="Blind speech dereverberation by diffusion posterior sampling.")
    ap.add_argument("--mode", choices=MODES)
    ap.add_argument("--in", dest="input", metavar="PATH", help="input WAV (benchmark: corpus directory)")
    ap.add_argument("--out", dest="output", metavar="PATH", help="output WAV (benchmark: CSV report)")
    ap.add_argument("--rir-in", metavar="PATH", help="measured RIR for informed mode")
    ap.add_argument("--rir-out", metavar="PATH", help="write the RIR estimate as WAV")
    ap.add_argument("--config", metavar="PATH", help="JSON config; flags take precedence")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--score-model", metavar="SPEC", help="'gaussian' or 'external:<command>'")
    ap.add_argument("--steps", type=int, help="number of diffusion steps")
    ap.add_argument("--inner-its", type=int, help="RIR optimizer iterations per step")
    ap.add_argument("--report", metavar="PATH", help="write JSON diagnostics")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse uses 2 for usage errors; here 2 means I/O failure.
        return EXIT_CONFIG if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    overrides = {k: getattr(args, k) for k in ("mode", "seed", "input", "output", "rir_in", "rir_out", "report", "score_model", "steps", "inner_its")}
    try:
        cfg = load_config(args.config, overrides)
        cfg.validate()
    except ConfigError as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        try:
            execute(cfg)
        except SamplerError as exc:
            if isinstance(exc.cause, (ProtocolError, OSError)):
                raise exc.cause from exc
            raise
    except (AudioFormatError, ConfigError, SizingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SamplerError, NonFiniteGradient, FloatingPointError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ProtocolError, ValueError) as exc:
        print(f"error: I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
