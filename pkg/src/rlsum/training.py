"""Maximum-likelihood, self-critical and mixed training, evaluation and diagnostics."""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, NonFiniteError, Tape, Tensor
from .decoding import beam_search, greedy_decode, sample_decode
from .forward import StreamingDecoder, SummaryModel, forced_path
from .model import ModelConfig, ModelParams, save_checkpoint
from .pointer import ClampStats, marginal_log_likelihood, supervised_log_likelihood
from .rouge import METRICS, RougeScore, reward, rouge_n, score_corpus
from .textdata import Example, SOS_ID, UNK_ID

log = logging.getLogger(__name__)

OBJECTIVES = ("ml", "rl", "ml+rl")
TRAINLOG_FORMAT = "rlsum.trainlog"


class TrainingDiverged(RuntimeError):
    """Raised when a loss or gradient turns non-finite; the last good checkpoint is kept."""


class WarmStartRequired(ValueError):
    """RL objectives need ML-trained parameters unless cold start is allowed."""


@dataclass
class TrainingConfig:
    objective: str = "ml"
    gamma: float = 0.9984
    lr: float | None = None  # None: 1e-3 for ML, 1e-4 for RL and ML+RL
    batch_size: int = 50
    sampling_prob: float = 0.25
    reward_metric: str = "rouge-l"
    max_steps: int = 1000
    seed: int = 0
    checkpoint_every: int = 0
    validate_every: int = 0
    validation_size: int | None = None
    patience: int | None = None
    profile: str = "desk"
    intra_decoder: bool = True
    supervision: str = "labeled"  # or "marginal"
    beam_width: int = 5
    clip_norm: float | None = 2.0
    max_output_len: int = 100
    init_scale: float = 0.1
    warm_start: str | None = None
    cold_start: bool = False

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if not 0.0 <= self.sampling_prob <= 1.0:
            raise ValueError("sampling_prob must lie in [0, 1]")
        if self.supervision not in ("labeled", "marginal"):
            raise ValueError("supervision must be 'labeled' or 'marginal'")
        if self.batch_size < 1 or self.max_steps < 0:
            raise ValueError("batch_size must be positive and max_steps non-negative")

    @property
    def learning_rate(self) -> float:
        if self.lr is not None:
            return self.lr
        return 1e-3 if self.objective == "ml" else 1e-4

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)

    def append(self, **rec) -> None:
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def write(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"format": TRAINLOG_FORMAT, "version": 1}) + "\n")
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> "TrainLog":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([json.loads(line) for line in lines[1:] if line.strip()])


# ---------------------------------------------------------------------------
# losses


def _gold_inputs(model: SummaryModel, ex: Example) -> list[int]:
    return [SOS_ID] + [model.input_vocab.id(t) for t in ex.target_tokens[:-1]]


def scheduled_inputs(model: SummaryModel, ex: Example, sampling_prob: float, rng: np.random.Generator) -> list[int]:
    """Decoder input ids with scheduled sampling.

    From the second step on, each input is with probability
    ``sampling_prob`` the arg-max token of the model's previous-step
    distribution (computed along the inputs actually fed) instead of the
    ground-truth token.
    """
    gold = _gold_inputs(model, ex)
    if sampling_prob <= 0.0 or len(gold) == 1:
        return gold
    dec = model.decoder(ex.input_tokens, ex.input_ids)
    state = dec.start()
    prev_ext = dec.start_index
    inputs = [SOS_ID]
    for t in range(1, len(gold)):
        dist, state = dec.step_distribution(state, prev_ext)
        if rng.random() < sampling_prob:
            prev_ext = int(np.argmax(dist.extended()))
            inputs.append(int(dec.vocab.embed_ids[prev_ext]))
        else:
            tok = ex.target_tokens[t - 1]
            prev_ext = dec.vocab.index.get(tok, UNK_ID)
            inputs.append(gold[t])
    return inputs


def ml_loss(
    p: dict[str, Tensor],
    model: SummaryModel,
    ex: Example,
    sampling_prob: float = 0.0,
    rng: np.random.Generator | None = None,
    supervision: str = "labeled",
    stats: ClampStats | None = None,
) -> Tensor:
    """Negative log-likelihood of the reference summary under teacher forcing."""
    T = len(ex.target_ids)
    if T == 0:
        raise ValueError("cannot compute a loss for an empty target")
    if sampling_prob > 0.0:
        if rng is None:
            raise ValueError("scheduled sampling needs a random generator")
        inputs = scheduled_inputs(model, ex, sampling_prob, rng)
    else:
        inputs = _gold_inputs(model, ex)
    out = forced_path(p, model.config, ex.input_ids, inputs)
    if supervision == "labeled":
        ll = supervised_log_likelihood(
            out.log_alpha, out.log_p_gen, out.log_switch, out.log_no_switch,
            ex.target_ids, ex.pointer_flags, ex.pointer_positions, stats,
        )
    else:
        out_vocab = model.output_vocab
        gen_mask = np.array(
            [tok in out_vocab or tok not in ex.input_tokens for tok in ex.target_tokens], dtype=np.float64
        )
        match = np.array([[x == y for x in ex.input_tokens] for y in ex.target_tokens], dtype=np.float64)
        ll = marginal_log_likelihood(out.alpha, out.log_p_gen, out.switch, np.asarray(ex.target_ids), gen_mask, match, stats)
    return -ad.tsum(ll)


def sequence_log_prob(
    p: dict[str, Tensor],
    model: SummaryModel,
    ex: Example,
    decoder: StreamingDecoder,
    indices: Sequence[int],
    stats: ClampStats | None = None,
) -> Tensor:
    """``Σ_t log p(y_t | y_<t, x)`` of an extended-vocabulary path under the full mixture."""
    idx = np.asarray(indices, dtype=np.int64)
    vocab = decoder.vocab
    inputs = np.concatenate([[SOS_ID], vocab.embed_ids[idx[:-1]]]).astype(np.int64)
    out = forced_path(p, model.config, ex.input_ids, inputs)
    in_vout = idx < vocab.v_out
    gen_ids = np.where(in_vout, idx, 0)
    match = vocab.copy_index[None, :] == idx[:, None]
    ll = marginal_log_likelihood(out.alpha, out.log_p_gen, out.switch, gen_ids, in_vout, match, stats)
    return ad.tsum(ll)


@dataclass
class RLStats:
    reward_greedy: float
    reward_sample: float
    sample_len: int
    skipped: bool = False


def rl_loss(
    p: dict[str, Tensor],
    model: SummaryModel,
    ex: Example,
    reward_fn: Callable[[Sequence[str], Sequence[str]], float],
    rng: np.random.Generator | int,
    max_len: int,
    stats: ClampStats | None = None,
) -> tuple[Tensor | None, RLStats]:
    """Self-critical loss ``(r(greedy) - r(sample)) · Σ log p(sample)``.

    The reward difference is a constant factor; returns ``(None, stats)``
    when the sample is empty.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    dec = model.decoder(ex.input_tokens, ex.input_ids)
    baseline = greedy_decode(dec, max_len)
    sample = sample_decode(dec, max_len, rng)
    ref = ex.summary_tokens
    r_hat = float(reward_fn(baseline.tokens, ref))
    r_s = float(reward_fn(sample.tokens, ref))
    info = RLStats(r_hat, r_s, len(sample.tokens))
    if not sample.tokens:
        info.skipped = True
        return None, info
    logp = sequence_log_prob(p, model, ex, dec, sample.indices, stats)
    return logp * (r_hat - r_s), info


def mixed_loss(l_rl, l_ml, gamma: float):
    """``γ · L_rl + (1 - γ) · L_ml``."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    return gamma * l_rl + (1.0 - gamma) * l_ml


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    params: ModelParams
    log: TrainLog
    best_path: Path | None
    last_path: Path | None
    best_score: float | None


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    pos = 0
    while True:
        if pos + size > n:
            tail = order[pos:]
            order = rng.permutation(n)
            need = size - len(tail)
            batch, pos = np.concatenate([tail, order[:need]]), need
        else:
            batch, pos = order[pos : pos + size], pos + size
        yield [int(i) for i in batch]


def validation_score(model: SummaryModel, examples: Sequence[Example], max_len: int, metric: str = "rouge-l") -> float:
    """Mean greedy-decode reward metric F1 (no stemming) over ``examples``."""
    if not examples:
        return 0.0
    total = 0.0
    for ex in examples:
        hyp = greedy_decode(model.decoder(ex.input_tokens, ex.input_ids), max_len)
        total += reward(hyp.tokens, ex.summary_tokens, metric)
    return total / len(examples)


def train_step(
    params: ModelParams,
    model: SummaryModel,
    batch: Sequence[Example],
    config: TrainingConfig,
    rng: np.random.Generator,
    stats: ClampStats,
) -> dict:
    """Average the objective over ``batch`` and return gradients plus diagnostics."""
    grads = {k: np.zeros_like(v) for k, v in params.arrays.items()}
    totals = {"loss": 0.0, "ml": 0.0, "rl": 0.0, "r_greedy": 0.0, "r_sample": 0.0}
    used = 0
    skipped = 0
    reward_fn = lambda hyp, ref: reward(hyp, ref, config.reward_metric)  # noqa: E731
    for ex in batch:
        p = params.tensors()
        with Tape() as tape:
            l_ml = l_rl = None
            if config.objective in ("ml", "ml+rl"):
                l_ml = ml_loss(p, model, ex, config.sampling_prob, rng, config.supervision, stats)
            if config.objective in ("rl", "ml+rl"):
                l_rl, info = rl_loss(p, model, ex, reward_fn, rng, config.max_output_len, stats)
                totals["r_greedy"] += info.reward_greedy
                totals["r_sample"] += info.reward_sample
                if l_rl is None:
                    skipped += 1
                    if config.objective == "rl":
                        continue
                    l_rl = ad.tensor(0.0)
            if config.objective == "ml":
                loss = l_ml
            elif config.objective == "rl":
                loss = l_rl
            else:
                loss = mixed_loss(l_rl, l_ml, config.gamma)
        if not math.isfinite(float(loss.value)):
            raise TrainingDiverged(f"non-finite loss on example {ex.uid}")
        g = ad.backward(tape, loss, p.values())
        for name, t in p.items():
            grads[name] += g[t]
        used += 1
        totals["loss"] += float(loss.value)
        if l_ml is not None:
            totals["ml"] += float(l_ml.value)
        if l_rl is not None:
            totals["rl"] += float(l_rl.value)
    n = len(batch)
    denom = max(used, 1)
    for k in grads:
        grads[k] /= denom
    return {
        "grads": grads,
        "loss": totals["loss"] / denom,
        "loss_ml": totals["ml"] / denom,
        "loss_rl": totals["rl"] / denom,
        "reward_greedy": totals["r_greedy"] / n,
        "reward_sample": totals["r_sample"] / n,
        "skipped": skipped,
    }


def build_model(config: TrainingConfig, input_vocab, output_vocab, init: ModelParams | None = None) -> SummaryModel:
    if init is None:
        mcfg = ModelConfig.from_profile(
            config.profile, len(input_vocab), len(output_vocab), intra_decoder=config.intra_decoder
        )
        init = ModelParams.initialize(mcfg, seed=config.seed, scale=config.init_scale, vocab_digest=input_vocab.digest())
    return SummaryModel(init, input_vocab, output_vocab)


def train(
    config: TrainingConfig,
    train_set: Sequence[Example],
    input_vocab,
    output_vocab,
    out_dir: str | Path | None = None,
    valid_set: Sequence[Example] | None = None,
    init_params: ModelParams | None = None,
    callback: Callable[[int, SummaryModel], bool] | None = None,
) -> TrainResult:
    """Mini-batch training; fully deterministic given ``config.seed``.

    ``callback(step, model)`` runs after every update and may return True to
    stop early.  Checkpoints and the log go to ``out_dir`` when given.
    """
    if not train_set:
        raise ValueError("training set is empty")
    if config.objective != "ml" and init_params is None:
        if config.warm_start:
            init_params = ModelParams.load(config.warm_start)
        elif not config.cold_start:
            raise WarmStartRequired("RL objectives start from ML parameters; pass a warm start or allow cold start")
    model = build_model(config, input_vocab, output_vocab, init_params.copy() if init_params is not None else None)
    params = model.params
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "ckpt-000000.bin", params, {"step": 0})

    rng = np.random.default_rng(config.seed)
    batches = _batches(len(train_set), min(config.batch_size, len(train_set)), rng)
    adam = AdamState()
    tlog = TrainLog()
    stats = ClampStats()
    valid = list(valid_set or [])[: config.validation_size]
    best_score = None
    best_path = None
    stale = 0
    lr = config.learning_rate

    def snapshot(name: str, step: int) -> Path | None:
        if out is None:
            return None
        path = out / name
        save_checkpoint(path, params, {"step": step})
        return path

    for step in range(1, config.max_steps + 1):
        batch = [train_set[i] for i in next(batches)]
        good = {k: v.copy() for k, v in params.arrays.items()}
        try:
            res = train_step(params, model, batch, config, rng, stats)
            grad_norm = ad.clip_by_global_norm(res["grads"], config.clip_norm)
            ad.adam_step(params.arrays, res["grads"], adam, lr)
        except (TrainingDiverged, NonFiniteError) as exc:
            params.arrays.update(good)
            snapshot("last-good.bin", step - 1)
            if out is not None:
                tlog.write(out / "trainlog.jsonl")
            raise TrainingDiverged(str(exc)) from exc
        rec = {
            "step": step,
            "loss": res["loss"],
            "loss_ml": res["loss_ml"],
            "loss_rl": res["loss_rl"],
            "reward_greedy": res["reward_greedy"],
            "reward_sample": res["reward_sample"],
            "grad_norm": grad_norm,
            "clamped": stats.count,
            "skipped": res["skipped"],
        }
        if config.validate_every and valid and step % config.validate_every == 0:
            val = validation_score(model, valid, config.max_output_len, config.reward_metric)
            rec["valid_" + config.reward_metric] = val
            if best_score is None or val > best_score:
                best_score = val
                best_path = snapshot("best.bin", step)
                stale = 0
            else:
                stale += 1
        tlog.append(**rec)
        if config.checkpoint_every and step % config.checkpoint_every == 0:
            snapshot(f"ckpt-{step:06d}.bin", step)
        if step % 50 == 0:
            log.info("step %d loss %.4f", step, res["loss"])
        if callback is not None and callback(step, model):
            break
        if config.patience is not None and stale > config.patience:
            log.info("early stop at step %d", step)
            break
    if len(tlog):
        last_path = snapshot("last.bin", len(tlog))
    else:
        last_path = out / "ckpt-000000.bin" if out is not None else None
    if out is not None:
        tlog.write(out / "trainlog.jsonl")
    return TrainResult(params, tlog, best_path, last_path, best_score)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    hypotheses: list[list[str]]
    per_example: list[dict[str, RougeScore]]
    means: dict[str, RougeScore]
    empty: list[int]


def _decode_chunk(job) -> list[list[str]]:
    model, examples, beam_width, max_len = job
    return decode_all(model, examples, beam_width, max_len)


def decode_all(
    model: SummaryModel, examples: Sequence[Example], beam_width: int, max_len: int, workers: int = 1
) -> list[list[str]]:
    """Decode every example (greedy when ``beam_width <= 0``), optionally across processes."""
    if workers > 1 and len(examples) > 1:
        chunks = [list(examples[i::workers]) for i in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_decode_chunk, [(model, c, beam_width, max_len) for c in chunks]))
        hyps: list[list[str] | None] = [None] * len(examples)
        for i, part in enumerate(parts):
            hyps[i::workers] = part
        return hyps
    hyps = []
    for ex in examples:
        dec = model.decoder(ex.input_tokens, ex.input_ids)
        hyp = greedy_decode(dec, max_len) if beam_width <= 0 else beam_search(dec, beam_width, max_len)
        hyps.append(hyp.tokens)
    return hyps


def evaluate(
    model: SummaryModel | None,
    examples: Sequence[Example],
    beam_width: int = 5,
    max_len: int = 100,
    stem: bool = True,
    limited_length: bool = False,
    metrics: Sequence[str] = METRICS,
    hypotheses: Sequence[Sequence[str]] | None = None,
    workers: int = 1,
) -> EvalResult:
    """Decode (unless ``hypotheses`` are given) and score against the references.

    Full-length F1 by default; ``limited_length`` truncates each hypothesis
    to its reference length first (read the ``recall`` field).
    """
    if hypotheses is None:
        hypotheses = decode_all(model, examples, beam_width, max_len, workers)
    hyps = [list(h) for h in hypotheses]
    refs = [ex.summary_tokens for ex in examples]
    per, means = score_corpus(zip(hyps, refs), metrics, stem=stem, limited_length=limited_length)
    empty = [i for i, h in enumerate(hyps) if not h]
    return EvalResult(hyps, per, means, empty)


def cumulative_relative_improvement(
    lengths: Sequence[int], scores_a: Sequence[float], scores_b: Sequence[float]
) -> list[dict]:
    """Relative improvement of A over B on examples up to each reference length.

    Row for threshold ``L`` compares mean scores over all examples whose
    reference has at most ``L`` tokens; the last row covers the corpus.
    """
    order = sorted(range(len(lengths)), key=lambda i: lengths[i])
    rows = []
    sum_a = sum_b = 0.0
    k = 0
    for pos, i in enumerate(order):
        sum_a += scores_a[i]
        sum_b += scores_b[i]
        k += 1
        if pos + 1 < len(order) and lengths[order[pos + 1]] == lengths[i]:
            continue
        mean_a, mean_b = sum_a / k, sum_b / k
        if mean_b > 0:
            rel = (mean_a - mean_b) / mean_b
        else:
            rel = 0.0 if mean_a == mean_b else math.inf
        rows.append({"max_length": lengths[i], "n": k, "mean_a": mean_a, "mean_b": mean_b, "relative_improvement": rel})
    return rows


def length_bucket_diagnostic(
    model_a: SummaryModel,
    model_b: SummaryModel,
    examples: Sequence[Example],
    beam_width: int = 5,
    max_len: int = 100,
    metric: str = "rouge-1",
) -> list[dict]:
    """Cumulative ROUGE improvement of ``model_a`` over ``model_b`` by reference length."""
    a = evaluate(model_a, examples, beam_width, max_len, metrics=(metric,))
    b = a if model_b is model_a else evaluate(model_b, examples, beam_width, max_len, metrics=(metric,))
    lengths = [len(ex.summary_tokens) for ex in examples]
    return cumulative_relative_improvement(
        lengths, [s[metric].f1 for s in a.per_example], [s[metric].f1 for s in b.per_example]
    )


def rouge1_f1(hyp, ref) -> float:
    return rouge_n(hyp, ref, 1).f1
