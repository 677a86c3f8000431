"""Training loop: warm-up, alternating network/dictionary phases, accept/reject steps."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, NumericFailure
from .model import (AnchorSet, Hyperparameters, ModelState, ObjectiveResult, PhaseWeights,
                    PosteriorNoise, evaluate_objective, full_objective)
from .nets import adam_step
from .transport import TransportDictionary

PHASES = ("warmup", "net", "psi", "joint")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    return format(float(v), ".17g")


@dataclass
class LogRow:
    step: int
    phase: str
    objective: float
    recon: float
    posterior_fidelity: float
    posterior_sparsity: float
    prior: float
    frobenius: float
    transopt: float
    accepted: bool | None
    lr_psi: float
    infer_iters_mean: float
    infer_iters_max: int


@dataclass
class TrainingLog:
    """Per-step record of a run.

    Wall times are kept beside the rows but written to a separate file so
    the main CSV is a pure function of config and seed.
    """

    rows: list[LogRow] = field(default_factory=list)
    wall_times: list[float] = field(default_factory=list)
    final_frobenius: list[float] = field(default_factory=list)

    COLUMNS = [f.name for f in fields(LogRow)]

    def append(self, row: LogRow, wall_time: float) -> None:
        if self.rows and row.step <= self.rows[-1].step:
            raise ValueError("log rows must be chronological")
        if row.accepted is not None and row.phase not in ("psi", "joint"):
            raise ValueError("accepted flag only belongs to dictionary phases")
        self.rows.append(row)
        self.wall_times.append(float(wall_time))

    def __len__(self):
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.COLUMNS)
            for r in self.rows:
                w.writerow([_fmt(getattr(r, c)) for c in self.COLUMNS])

    def write_timing_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "wall_time"])
            for r, t in zip(self.rows, self.wall_times):
                w.writerow([r.step, _fmt(t)])

    @classmethod
    def read_csv(cls, path, timing_path=None) -> "TrainingLog":
        try:
            with open(path, newline="") as fh:
                rows = list(csv.reader(fh))
        except OSError as exc:
            raise ConfigurationError(f"cannot read log {path}: {exc}") from exc
        if not rows or rows[0] != cls.COLUMNS:
            raise ConfigurationError(f"{path}: header does not match the training log schema")
        log = cls()
        times = {}
        if timing_path is not None and Path(timing_path).exists():
            with open(timing_path, newline="") as fh:
                for rec in list(csv.reader(fh))[1:]:
                    times[int(rec[0])] = float(rec[1])
        for lineno, rec in enumerate(rows[1:], start=2):
            try:
                row = LogRow(int(rec[0]), rec[1], *(float(v) for v in rec[2:9]),
                             None if rec[9] == "" else rec[9] == "1",
                             float(rec[10]), float(rec[11]), int(rec[12]))
            except (ValueError, IndexError) as exc:
                raise ConfigurationError(f"{path}:{lineno}: malformed log row ({exc})") from exc
            log.rows.append(row)
            log.wall_times.append(times.get(row.step, float("nan")))
        return log


def _with_dictionary(model: ModelState, dictionary: TransportDictionary) -> ModelState:
    return ModelState(model.encoder, model.decoder, dictionary, model.anchors,
                      model.adam_encoder, model.adam_decoder, model.adam_anchors)


def psi_phase_weights(hp: Hyperparameters) -> PhaseWeights:
    return PhaseWeights(recon=hp.recon_weight_during_psi_steps, prior=1.0)


def net_phase_weights(hp: Hyperparameters) -> PhaseWeights:
    return PhaseWeights(recon=1.0, prior=hp.prior_weight_during_net_steps)


def transport_step(model: ModelState, X, keys, hp: Hyperparameters, rng, lr_psi: float,
                   evaluation: ObjectiveResult | None = None,
                   weights: PhaseWeights | None = None):
    """Gradient step on the dictionary kept only if it lowers the transport objective.

    The candidate is scored on the same batch, posterior noise and inferred
    coefficients as the current dictionary, which matches the stop-gradient
    treatment of the coefficients in the proposal.  Returns ``(model, accepted, lr_psi',
    info)``; a tie counts as a rejection.
    """
    if not lr_psi > 0:
        raise ConfigurationError("lr_psi must be positive")
    weights = weights or psi_phase_weights(hp)
    if evaluation is None:
        evaluation = full_objective(model, X, keys, hp, rng, weights)
    noise: PosteriorNoise = evaluation.extras["noise"]
    old = evaluation.transopt
    proposal = model.dictionary.operators - lr_psi * evaluation.grad_psi
    new = float("inf")
    if np.all(np.isfinite(proposal)):
        candidate = _with_dictionary(model, TransportDictionary(proposal))
        try:
            new = evaluate_objective(candidate, X, keys, noise, hp, None, weights,
                                     coefficients=evaluation.coefficients, grad=False).transopt
        except NumericFailure:
            new = float("inf")
    accepted = new < old
    if accepted:
        model = candidate
        lr_psi = min(lr_psi * hp.lr_decay, hp.lr_psi_max)
    else:
        lr_psi = lr_psi / hp.lr_decay
    return model, bool(accepted), lr_psi, {"transopt_old": old, "transopt_new": new}


def _network_update(model: ModelState, res: ObjectiveResult, hp: Hyperparameters) -> ModelState:
    enc, st_e = adam_step(model.encoder.arrays(), res.grad_encoder, model.adam_encoder, hp.lr_net)
    dec, st_d = adam_step(model.decoder.arrays(), res.grad_decoder, model.adam_decoder, hp.lr_net)
    anchors, st_a = model.anchors, model.adam_anchors
    if model.anchors.trainable:
        (pts,), st_a = adam_step([model.anchors.points], [res.grad_anchors], model.adam_anchors,
                                 hp.lr_anchor)
        anchors = AnchorSet(pts, model.anchors.labels, True)
    return ModelState(model.encoder.with_arrays(enc), model.decoder.with_arrays(dec),
                      model.dictionary, anchors, st_e, st_d, st_a)


def phase_at(step: int, hp: Hyperparameters) -> str:
    if step < hp.warmup_steps:
        return "warmup"
    if hp.net_update_steps == 0 or hp.psi_update_steps == 0:
        return "joint"
    k = (step - hp.warmup_steps) % (hp.net_update_steps + hp.psi_update_steps)
    return "net" if k < hp.net_update_steps else "psi"


def check_training_inputs(hp: Hyperparameters, inputs, keys, anchors: AnchorSet) -> None:
    inputs = np.atleast_2d(inputs)
    if inputs.shape[0] == 0:
        raise ConfigurationError("training set is empty")
    if inputs.shape[1] != hp.data_dim:
        raise ConfigurationError(f"data_dim = {hp.data_dim} but inputs have {inputs.shape[1]} columns")
    if anchors.points.shape[1] != hp.data_dim:
        raise ConfigurationError("anchor dimension differs from data_dim")
    missing = sorted(set(np.unique(keys).tolist()) - set(anchors.labels.tolist()))
    if missing:
        raise ConfigurationError(f"no anchors for classes/groups {missing[:10]}")


def train(hp: Hyperparameters, inputs, keys, anchors: AnchorSet, seed: int,
          log_path=None, progress=None):
    """Run the full schedule and return ``(model, log)``.

    ``keys`` names the anchor group of each training row (class labels, or
    sample ids for per-sample anchors).  On a numeric failure the partial
    log is written to ``log_path`` (if given) before the error propagates.
    """
    hp.validate()
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    keys = np.asarray(keys, dtype=np.int64).reshape(-1)
    check_training_inputs(hp, inputs, keys, anchors)
    rng = np.random.default_rng(seed)
    model = ModelState.initialize(hp, anchors, rng)
    log = TrainingLog()
    lr_psi = hp.lr_psi_start
    N = inputs.shape[0]
    batch = min(hp.batch_size, N)
    try:
        for step in range(hp.train_steps):
            t0 = time.perf_counter()
            idx = rng.choice(N, size=batch, replace=False)
            X, k = inputs[idx], keys[idx]
            phase = phase_at(step, hp)
            accepted = None
            if phase == "warmup":
                noise = PosteriorNoise.draw(rng, batch, hp.samples_per_point, hp.num_operators,
                                            hp.latent_dim)
                res = evaluate_objective(model, X, k, noise, hp, rng, recon_only=True,
                                         b=hp.warmup_laplace_scale, gamma=0.0)
                model = _network_update(model, res, hp)
            elif phase == "net":
                res = full_objective(model, X, k, hp, rng, net_phase_weights(hp))
                model = _network_update(model, res, hp)
            elif phase == "psi":
                res = full_objective(model, X, k, hp, rng, psi_phase_weights(hp))
                model, accepted, lr_psi, _ = transport_step(model, X, k, hp, rng, lr_psi, res)
            else:
                weights = PhaseWeights()
                res = full_objective(model, X, k, hp, rng, weights)
                model, accepted, lr_psi, _ = transport_step(model, X, k, hp, rng, lr_psi, res, weights)
                model = _network_update(model, res, hp)
            iters = res.coefficients.iterations
            t = res.terms
            log.append(LogRow(step, phase, res.value, t["recon"], t.get("posterior_fidelity", 0.0),
                              t.get("posterior_sparsity", 0.0), t.get("prior", 0.0), t["frobenius"],
                              res.transopt, accepted, lr_psi,
                              float(iters.mean()) if iters.size else 0.0,
                              int(iters.max()) if iters.size else 0),
                       time.perf_counter() - t0)
            if progress is not None:
                progress(step, log.rows[-1], model)
    except NumericFailure:
        if log_path is not None:
            log.write_csv(log_path)
        raise
    log.final_frobenius = [float(v) for v in np.sqrt((model.dictionary.operators ** 2).sum(axis=(1, 2)))]
    if log_path is not None:
        log.write_csv(log_path)
    return model, log
