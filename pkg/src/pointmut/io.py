"""Reading and writing generators, datasets, trajectories and CSV tables."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable

import numpy as np

from .estimation import FitResult, TransitionDataset
from .generators import FactorizedModel, FullGenerator, Parameterization
from .samplers import Trajectory
from .state_space import Alphabet, StateSpace

FORMAT_VERSION = 1


def space_header(space: StateSpace) -> dict:
    return {"alphabet": "".join(space.alphabet.symbols), "length": space.length}


def space_from_header(header: dict) -> StateSpace:
    return StateSpace(Alphabet.from_string(header["alphabet"]), int(header["length"]))


# -- generators -----------------------------------------------------------------------


def generator_to_dict(model: FullGenerator | FactorizedModel, seed=None, epsilon=None, **extra) -> dict:
    header = {"format": FORMAT_VERSION, **space_header(model.space), "seed": seed}
    if epsilon is not None:
        header["epsilon"] = epsilon
    header.update(extra)
    if isinstance(model, FullGenerator):
        header["kind"] = "full"
        return {"header": header, "rates": model.dense().tolist()}
    header["kind"] = model.parameterization.value
    key = "rates" if model.is_context_free else "theta"
    return {"header": header, key: model.params.tolist()}


def generator_from_dict(doc: dict) -> FullGenerator | FactorizedModel:
    header = doc["header"]
    space = space_from_header(header)
    kind = header["kind"]
    if kind == "full":
        return FullGenerator(space, np.array(doc["rates"], dtype=float))
    if kind == Parameterization.CONTEXT_FREE.value:
        return FactorizedModel.context_free(space, np.array(doc["rates"], dtype=float))
    if kind == Parameterization.CONTEXT_TABULAR.value:
        return FactorizedModel.tabular(space, np.array(doc["theta"], dtype=float))
    raise ValueError(f"unknown generator kind {kind!r}")


def save_generator(path, model, seed=None, epsilon=None, **extra) -> Path:
    path = Path(path)
    # json writes floats with repr, which round-trips doubles exactly
    path.write_text(json.dumps(generator_to_dict(model, seed, epsilon, **extra)))
    return path


def load_generator(path) -> FullGenerator | FactorizedModel:
    return generator_from_dict(json.loads(Path(path).read_text()))


def load_generator_header(path) -> dict:
    return json.loads(Path(path).read_text())["header"]


# -- datasets -------------------------------------------------------------------------


def save_dataset(path, data: TransitionDataset, **extra) -> Path:
    path = Path(path)
    space = data.space
    header = {"format": FORMAT_VERSION, **space_header(space), **data.metadata, **extra}
    table = space.state_table
    syms = np.array(space.alphabet.symbols)
    strings = ["".join(row) for row in syms[table]]
    with path.open("w") as fh:
        fh.write(json.dumps({"header": header}) + "\n")
        for x, y, t in zip(data.parents.tolist(), data.children.tolist(), data.branch_lengths.tolist()):
            fh.write(json.dumps({"x": strings[x], "y": strings[y], "t": t}) + "\n")
    return path


def load_dataset(path) -> TransitionDataset:
    with Path(path).open() as fh:
        header = json.loads(fh.readline())["header"]
        space = space_from_header(header)
        xs, ys, ts = [], [], []
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            xs.append(space.parse(rec["x"]).index)
            ys.append(space.parse(rec["y"]).index)
            ts.append(float(rec["t"]))
    meta = {k: v for k, v in header.items() if k not in ("format", "alphabet", "length")}
    return TransitionDataset(space, np.array(xs, dtype=np.int64), np.array(ys, dtype=np.int64),
                             np.array(ts, dtype=float), meta)


# -- trajectories ---------------------------------------------------------------------


def write_trajectories(path, trajectories: Iterable[Trajectory], header: dict) -> Path:
    """One header line, then per trajectory a ``start`` line followed by its jumps."""
    path = Path(path)
    with path.open("w") as fh:
        fh.write(json.dumps({"header": header}) + "\n")
        for k, traj in enumerate(trajectories):
            symbols = traj.start.space.alphabet.symbols
            fh.write(json.dumps({"trajectory": k, "start": str(traj.start), "t": traj.branch_length}) + "\n")
            for time, site, a, b in traj.jumps:
                fh.write(json.dumps({"time": time, "site": site, "from_symbol": symbols[a],
                                     "to_symbol": symbols[b]}) + "\n")
            fh.write(json.dumps({"trajectory": k, "end": str(traj.end)}) + "\n")
    return path


def read_trajectories(path, space: StateSpace) -> tuple[dict, list[Trajectory]]:
    out: list[Trajectory] = []
    alpha = space.alphabet
    with Path(path).open() as fh:
        header = json.loads(fh.readline())["header"]
        for line in fh:
            rec = json.loads(line)
            if "start" in rec:
                out.append(Trajectory(space.parse(rec["start"]), float(rec["t"])))
            elif "time" in rec:
                out[-1].jumps.append((float(rec["time"]), int(rec["site"]),
                                      alpha.index(rec["from_symbol"]), alpha.index(rec["to_symbol"])))
    return header, out


# -- tables ---------------------------------------------------------------------------


def write_csv(path, columns: list[str], rows: Iterable, units: dict[str, str] | None = None,
              manifest_hash: str | None = None, meta: dict | None = None) -> Path:
    """CSV with ``#`` comment lines for the manifest hash, units and run metadata."""
    path = Path(path)
    units = units or {}
    with path.open("w", newline="") as fh:
        fh.write(f"# manifest_hash: {manifest_hash or 'none'}\n")
        fh.write("# units: " + ", ".join(f"{c}={units.get(c, '-')}" for c in columns) + "\n")
        for k, v in (meta or {}).items():
            fh.write(f"# {k}: {v}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    return path


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def read_csv(path) -> tuple[dict[str, str], list[dict[str, str]]]:
    """Return the ``#`` comment metadata and the data rows as dicts."""
    meta, lines = {}, []
    with Path(path).open() as fh:
        for line in fh:
            if line.startswith("#"):
                key, _, value = line[1:].partition(":")
                meta[key.strip()] = value.strip()
            else:
                lines.append(line)
    return meta, list(csv.DictReader(lines))


def save_fit(out_dir, stem: str, result: FitResult, manifest_hash: str | None = None, **header) -> list[Path]:
    out_dir = Path(out_dir)
    model_path = save_generator(out_dir / f"{stem}.json", result.model, seed=result.config.seed,
                                estimator=result.config.estimator.value, training=result.config.to_dict(),
                                manifest_hash=manifest_hash, **header)
    n = len(result.train_loss_curve)
    rows = zip(range(1, n + 1), result.train_loss_curve, result.validation_loss_curve)
    loss_path = write_csv(out_dir / f"{stem}_loss.csv", ["epoch", "train_loss", "validation_loss"], rows,
                          units={"epoch": "count", "train_loss": "nats/record", "validation_loss": "nats/record"},
                          manifest_hash=manifest_hash,
                          meta={"best_epoch": result.best_epoch, "stopped_epoch": result.stopped_epoch})
    return [model_path, loss_path]
