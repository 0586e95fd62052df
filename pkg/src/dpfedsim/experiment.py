"""Run orchestration and metrics emission.

A run takes one ExperimentConfig to a directory of schema-versioned
CSVs: per-episode metrics, the privacy ledger, plus attack and detection
traces when armed. Timestamps and environment notes live in a sidecar
(run_info.txt) so the CSV outputs are a pure function of (config, seed).
"""

from __future__ import annotations

import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import csvio
from .config import ExperimentConfig
from .data import ingest_csv, load_cache, partition, split_holdout, stack_samples, synthesize
from .detection import detection_accuracy
from .federation import Attacker, EmptyAggregationError, FederationState, RoundRecord, run_episode

SCHEMAS = {
    "episodes": 1,
    "ledger": 1,
    "attack": 1,
    "detection": 1,
    "summary": 1,
    "report": 1,
    "loss_tables": 1,
    "qtable": 1,
    "rdp_trace": 1,
}


@dataclass
class MetricsBundle:
    """Paths of a run's emitted CSVs plus its derived summary."""

    out_dir: Path
    csv_paths: dict[str, Path]
    summary: dict
    status: str = "ok"

    def recompute_summary(self) -> dict:
        """Re-derive the summary from the CSVs (consistency check)."""
        rows = csvio.read_csv(self.csv_paths["episodes"], "episodes", SCHEMAS["episodes"])
        summary = {
            "episodes_executed": len(rows),
            "final_val_loss": float(rows[-1]["global_val_loss"]) if rows else float("nan"),
            "delta_spent": float(rows[-1]["delta_cumulative"]) if rows else 0.0,
        }
        if "detection" in self.csv_paths:
            det_rows = csvio.read_csv(self.csv_paths["detection"], "detection", SCHEMAS["detection"])
            by_episode: dict[str, list] = {}
            for row in det_rows:
                by_episode.setdefault(row["episode"], []).append(row)
            scores = []
            for rows_ep in by_episode.values():
                correct = sum(
                    1
                    for r in rows_ep
                    if (r["is_truly_malicious"] == "true") == (r["flagged"] == "true")
                )
                scores.append(100.0 * correct / len(rows_ep))
            summary["d_acc"] = float(np.mean(scores)) if scores else float("nan")
        return summary


def build_dataset(cfg: ExperimentConfig):
    """Materialize samples per the data block of the config."""
    source = cfg["data.source"]
    if source == "synthetic":
        return synthesize(cfg["data.n_samples"], cfg["seed"], cfg["data.noise_scale"])
    if source == "csv":
        cache_dir = cfg["data.cache_dir"] or None
        return ingest_csv(cfg["data.path"], cache_dir=cache_dir)
    return load_cache(cfg["data.path"])


def prepare_state(cfg: ExperimentConfig):
    """Dataset -> server holdout + node shards -> initial federation state."""
    samples = build_dataset(cfg)
    holdout, rest = split_holdout(samples, cfg["data.server_split"], cfg["seed"])
    shards = partition(rest, cfg["federation.nodes"], cfg["seed"])
    server_validation = stack_samples(holdout) if holdout else None
    fed_cfg = cfg.federation_config()
    state = FederationState.create(fed_cfg, shards, cfg.architecture(), server_validation)
    return state, fed_cfg


def build_attacker(cfg: ExperimentConfig) -> Optional[Attacker]:
    if cfg["attack.mode"] == "none":
        return None
    return Attacker(cfg["attack.mode"], cfg.attack_config())


def run(cfg: ExperimentConfig, out_dir) -> MetricsBundle:
    """Execute one configured run and persist its metrics."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = time.time()

    state, fed_cfg = prepare_state(cfg)
    attacker = build_attacker(cfg)
    detector = cfg.detector_config()
    detector_armed = detector.kind != "off"
    truth = attacker.config.compromised if attacker else frozenset()

    records: list[RoundRecord] = []
    status = "ok"
    for _ in range(fed_cfg.episodes):
        try:
            records.append(run_episode(state, fed_cfg, attacker, detector if detector_armed else None))
        except EmptyAggregationError as exc:
            status = f"aborted_empty_aggregation_episode_{exc.episode}"
            break
        if state.ledger.stopped:
            break

    paths = _emit_metrics(out_dir, cfg, records, attacker, detector_armed, truth)
    summary = {
        "episodes_executed": len(records),
        "final_val_loss": records[-1].global_val_loss if records else float("nan"),
        "delta_spent": records[-1].delta_cumulative if records else 0.0,
    }
    if detector_armed:
        summary["d_acc"] = detection_accuracy([r.verdicts for r in records], truth)
    _write_summary(out_dir / "summary.csv", cfg, summary, status)
    paths["summary"] = out_dir / "summary.csv"
    _write_sidecar(out_dir / "run_info.txt", cfg, status, started)
    return MetricsBundle(out_dir=out_dir, csv_paths=paths, summary=summary, status=status)


def _emit_metrics(
    out_dir: Path,
    cfg: ExperimentConfig,
    records: Sequence[RoundRecord],
    attacker: Optional[Attacker],
    detector_armed: bool,
    truth: frozenset,
) -> dict[str, Path]:
    detector_kind = cfg["detector.kind"]
    attack_by_episode = {row["episode"]: row for row in (attacker.trace if attacker else [])}

    episode_fields = [
        "episode", "n", "m_active", "global_val_loss", "delta_cumulative",
        "flagged_count", "detector_kind",
    ]
    if attacker:
        episode_fields += ["gamma_t", "loss_ratio"]
    episode_rows = []
    for rec in records:
        row = {
            "episode": rec.episode,
            "n": len(rec.submitted),
            "m_active": len(rec.active_compromised),
            "global_val_loss": rec.global_val_loss,
            "delta_cumulative": rec.delta_cumulative,
            "flagged_count": len(rec.flagged),
            "detector_kind": detector_kind,
        }
        if attacker:
            trace = attack_by_episode.get(rec.episode)
            row["gamma_t"] = trace["gamma_t"] if trace else None
            row["loss_ratio"] = trace["loss_ratio"] if trace else None
        episode_rows.append(row)

    paths = {
        "episodes": csvio.write_csv(
            out_dir / "episodes.csv", "episodes", SCHEMAS["episodes"], episode_fields, episode_rows
        )
    }

    ledger_rows = [
        {
            "episode": rec.episode,
            "delta_step": cfg["privacy.delta"],
            "delta_cumulative": rec.delta_cumulative,
            "stopped": rec.delta_cumulative > cfg["privacy.stop_threshold"],
        }
        for rec in records
    ]
    paths["ledger"] = csvio.write_csv(
        out_dir / "ledger.csv", "ledger", SCHEMAS["ledger"],
        ["episode", "delta_step", "delta_cumulative", "stopped"], ledger_rows,
    )

    if attacker:
        paths["attack"] = csvio.write_csv(
            out_dir / "attack.csv", "attack", SCHEMAS["attack"],
            ["episode", "gamma_t", "gamma_current", "loss_ratio", "avg_compromised_val_loss"],
            attacker.trace,
        )

    if detector_armed:
        det_rows = []
        for rec in records:
            for verdict in rec.verdicts:
                det_rows.append(
                    {
                        "episode": rec.episode,
                        "kind": detector_kind,
                        "beta1": cfg["detector.beta1"],
                        "beta2": cfg["detector.beta2"],
                        "d_max": cfg["detector.d_max"],
                        "orientation": cfg["detector.orientation"],
                        "node_id": verdict.node_id,
                        "rate": verdict.rate,
                        "flagged": verdict.flagged,
                        "is_truly_malicious": verdict.node_id in truth,
                    }
                )
        paths["detection"] = csvio.write_csv(
            out_dir / "detection.csv", "detection", SCHEMAS["detection"],
            ["episode", "kind", "beta1", "beta2", "d_max", "orientation",
             "node_id", "rate", "flagged", "is_truly_malicious"],
            det_rows,
        )
    return paths


def _write_summary(path: Path, cfg: ExperimentConfig, summary: dict, status: str) -> None:
    fields = [
        "status", "attack_mode", "detector_kind", "epsilon", "seed",
        "episodes_executed", "final_val_loss", "delta_spent", "d_acc",
    ]
    row = {
        "status": status,
        "attack_mode": cfg["attack.mode"],
        "detector_kind": cfg["detector.kind"],
        "epsilon": cfg["privacy.epsilon"],
        "seed": cfg["seed"],
        "episodes_executed": summary["episodes_executed"],
        "final_val_loss": summary["final_val_loss"],
        "delta_spent": summary["delta_spent"],
        "d_acc": summary.get("d_acc"),
    }
    csvio.write_csv(path, "summary", SCHEMAS["summary"], fields, [row])


def _write_sidecar(path: Path, cfg: ExperimentConfig, status: str, started: float) -> None:
    lines = [
        "# run sidecar (timestamps and environment; excluded from determinism)",
        f"status = {status}",
        f"started_unix = {started:.3f}",
        f"duration_s = {time.time() - started:.3f}",
        f"python = {sys.version.split()[0]}",
        "",
        "# resolved configuration (defaults filled in)",
    ]
    for key, value in sorted(cfg.resolved().items()):
        lines.append(f"{key} = {value}")
    path.write_text("\n".join(lines) + "\n")


def final_loss_runner(base: ExperimentConfig):
    """Loss-table generation hook: one federation run per call.

    Returns a callable (epsilon, gamma, seed) -> final validation loss,
    benign when gamma is None, otherwise a fixed-degree adaptive-noise
    attack using the base config's attacker block.
    """

    def final_loss(epsilon: float, gamma, seed: int) -> float:
        overrides = dict(base.values)
        overrides["privacy.epsilon"] = epsilon
        overrides["seed"] = seed
        if gamma is None:
            overrides["attack.mode"] = "none"
            overrides["attack.m"] = 0
        else:
            overrides["attack.mode"] = "mpelm"
            overrides["attack.m"] = max(1, int(base["attack.m"]))
            overrides["attack.gamma_fixed"] = gamma
        cfg = ExperimentConfig.from_dict(overrides)
        state, fed_cfg = prepare_state(cfg)
        attacker = build_attacker(cfg)
        records = []
        for _ in range(fed_cfg.episodes):
            records.append(run_episode(state, fed_cfg, attacker, None))
            if state.ledger.stopped:
                break
        return records[-1].global_val_loss

    return final_loss


def report(run_dirs: Sequence, out_path=None) -> tuple[str, list[dict]]:
    """Aggregate run summaries into a comparison table.

    Accepts run directories (each holding summary.csv); returns the
    rendered text table and the rows. Refuses mismatched schema versions.
    """
    rows = []
    for run_dir in sorted(Path(d) for d in run_dirs):
        summary_path = run_dir / "summary.csv"
        if not summary_path.exists():
            raise FileNotFoundError(f"{run_dir}: no summary.csv (not a run directory?)")
        name, version = csvio.read_schema_line(summary_path)
        if name != "summary" or version != SCHEMAS["summary"]:
            raise csvio.SchemaError(
                f"{summary_path}: schema {name} v{version} does not match summary v{SCHEMAS['summary']}"
            )
        for row in csvio.read_csv(summary_path, "summary", SCHEMAS["summary"]):
            rows.append({"run": run_dir.name, **row})

    fields = ["run", "status", "attack_mode", "detector_kind", "epsilon", "seed",
              "episodes_executed", "final_val_loss", "d_acc"]
    if out_path is not None:
        csvio.write_csv(out_path, "report", SCHEMAS["report"], fields, rows)

    if not rows:
        return "(no runs)", rows
    widths = {f: max(len(f), *(len(str(r.get(f, ""))) for r in rows)) for f in fields}
    lines = ["  ".join(f.ljust(widths[f]) for f in fields)]
    for row in rows:
        lines.append("  ".join(str(row.get(f, "")).ljust(widths[f]) for f in fields))
    return "\n".join(lines), rows


def discover_runs(parent) -> list[Path]:
    """Run directories directly under ``parent`` (those with summary.csv)."""
    parent = Path(parent)
    if (parent / "summary.csv").exists():
        return [parent]
    return sorted(p for p in parent.iterdir() if p.is_dir() and (p / "summary.csv").exists())
