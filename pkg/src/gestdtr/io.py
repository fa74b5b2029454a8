"""Dataset CSV and run-configuration serialization.

Dataset files are wide format, one row per subject: column ``id``, then per
stage j the covariate columns ``x{j}_<name>`` followed by ``a{j}``, and a
final ``y`` column.  Floats are written with shortest round-tripping repr so a
write/read cycle reproduces the arrays bit for bit.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, ModelSpec, StageModel
from .exceptions import SpecificationError
from .loglinear import IrlsOptions
from .simulation import Scenario


def write_dataset(dataset: Dataset, path) -> None:
    path = Path(path)
    header = ["id"]
    for j in range(dataset.n_stages):
        header.extend(f"x{j + 1}_{name}" for name in dataset.covariate_names[j])
        header.append(f"a{j + 1}")
    header.append("y")
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(dataset.n):
            row = [str(i)]
            for j in range(dataset.n_stages):
                row.extend(repr(float(v)) for v in dataset.covariates[j][i])
                row.append(repr(float(dataset.treatments[i, j])))
            row.append(repr(float(dataset.outcome[i])))
            writer.writerow(row)


def read_dataset(path) -> Dataset:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SpecificationError(f"{path}: empty dataset file") from None
        rows = list(reader)
    if not rows:
        raise SpecificationError(f"{path}: no data rows")
    if header[0] != "id" or header[-1] != "y":
        raise SpecificationError(
            f"{path}: expected 'id' first and 'y' last in header, got "
            f"{header[0]!r}..{header[-1]!r}"
        )

    # parse the per-stage blocks: x{j}_<name>* then a{j}
    names: list[list[str]] = []
    cov_cols: list[list[int]] = []
    a_cols: list[int] = []
    stage = 0
    col = 1
    while col < len(header) - 1:
        stage += 1
        stage_names, stage_cols = [], []
        prefix = f"x{stage}_"
        while col < len(header) - 1 and header[col].startswith(prefix):
            stage_names.append(header[col][len(prefix):])
            stage_cols.append(col)
            col += 1
        if col >= len(header) - 1 or header[col] != f"a{stage}":
            raise SpecificationError(
                f"{path}: expected column a{stage} at position {col}, got "
                f"{header[col] if col < len(header) else 'EOF'!r}"
            )
        names.append(stage_names)
        cov_cols.append(stage_cols)
        a_cols.append(col)
        col += 1

    def parse(value, line, column):
        try:
            return float(value)
        except ValueError:
            raise SpecificationError(
                f"{path}: line {line}, column {column}: not a number: {value!r}"
            ) from None

    n = len(rows)
    covs = [np.empty((n, len(c))) for c in cov_cols]
    treats = np.empty((n, stage))
    y = np.empty(n)
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise SpecificationError(
                f"{path}: line {i + 2} has {len(row)} fields, header has "
                f"{len(header)}"
            )
        for j, cols in enumerate(cov_cols):
            for k, c in enumerate(cols):
                covs[j][i, k] = parse(row[c], i + 2, c + 1)
            treats[i, j] = parse(row[a_cols[j]], i + 2, a_cols[j] + 1)
        y[i] = parse(row[-1], i + 2, len(header))
    return Dataset(covs, treats, y, names)


@dataclass
class SelectionOptions:
    """Selection configuration carried in run configs."""

    direction: str = "forward"
    criterion: str = "qic"
    candidate_terms: list = field(default_factory=list)
    candidate_models: list = field(default_factory=list)
    stage2_policy: str = "correct"


@dataclass
class RunConfig:
    """Declarative description of one CLI run."""

    command: str
    dataset_path: str | None = None
    spec: ModelSpec | None = None
    scenario: Scenario | None = None
    selection: SelectionOptions = field(default_factory=SelectionOptions)
    irls: IrlsOptions = field(default_factory=IrlsOptions)
    seed: int = 0
    reps: int = 200
    output: str | None = None
    format: str = "csv"

    def to_dict(self) -> dict:
        out = {
            "command": self.command,
            "dataset_path": self.dataset_path,
            "seed": self.seed,
            "reps": self.reps,
            "output": self.output,
            "format": self.format,
            "selection": asdict(self.selection),
            "irls": asdict(self.irls),
        }
        if self.spec is not None:
            out["spec"] = {
                "scale": self.spec.scale,
                "treatment_type": self.spec.treatment_type,
                "dose_range": list(self.spec.dose_range) if self.spec.dose_range else None,
                "stages": [asdict(m) for m in self.spec.stages],
            }
        if self.scenario is not None:
            sc = asdict(self.scenario)
            sc["psi_true"] = [list(map(float, p)) for p in self.scenario.psi_true]
            out["scenario"] = sc
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        spec = None
        if data.get("spec"):
            s = data["spec"]
            spec = ModelSpec(
                scale=s["scale"],
                treatment_type=s["treatment_type"],
                stages=[StageModel(**m) for m in s["stages"]],
                dose_range=tuple(s["dose_range"]) if s.get("dose_range") else None,
            )
        scenario = None
        if data.get("scenario"):
            scenario = Scenario(**data["scenario"])
        return cls(
            command=data["command"],
            dataset_path=data.get("dataset_path"),
            spec=spec,
            scenario=scenario,
            selection=SelectionOptions(**data.get("selection", {})),
            irls=IrlsOptions(**data.get("irls", {})),
            seed=data.get("seed", 0),
            reps=data.get("reps", 200),
            output=data.get("output"),
            format=data.get("format", "csv"),
        )

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def read(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))
