"""Standard and adversarial training, evaluation, and checkpoint persistence."""

import dataclasses
import io
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import attacks
from .backbones import BackboneSpec, Classifier, init_model, loss_and_grads
from .errors import (
    BadMagicError,
    ConfigError,
    ShapeMismatchOnLoadError,
    TruncatedFileError,
    VersionMismatchError,
)
from .params import is_trainable, named_arrays
from .pooling import PoolSpec


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    optimizer: str = "adam"        # "adam" or "sgd"
    lr: float = 0.01
    lr_halve_every: int = 20
    momentum: float = 0.9
    at_steps: int = 0              # 0 disables adversarial training
    at_epsilon: float = 0.05
    at_random_start: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.at_steps < 0 or self.at_epsilon < 0:
            raise ConfigError("adversarial training needs non-negative steps/epsilon")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

ADAM_BETA1, ADAM_BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


def init_optimizer_state():
    return {"t": 0, "slots": {}}


def optimizer_step(kind, tensors, grads, state, lr, momentum=0.9):
    """One update over {name: tensor} views; tensors change in place.

    Only names present in `grads` are touched, so batch-norm running
    statistics are never optimized.
    """
    if kind == "adam":
        state["t"] += 1
        t = state["t"]
        bc1 = 1.0 - ADAM_BETA1 ** t
        bc2 = 1.0 - ADAM_BETA2 ** t
        for name, g in grads.items():
            p = tensors[name]
            if g.shape != p.shape:
                raise ConfigError(f"gradient shape {g.shape} != param shape {p.shape} for {name}")
            slot = state["slots"].setdefault(
                name, {"m": np.zeros_like(p), "v": np.zeros_like(p)})
            slot["m"][...] = ADAM_BETA1 * slot["m"] + (1.0 - ADAM_BETA1) * g
            slot["v"][...] = ADAM_BETA2 * slot["v"] + (1.0 - ADAM_BETA2) * (g * g)
            mhat = slot["m"] / bc1
            vhat = slot["v"] / bc2
            p -= (lr * mhat / (np.sqrt(vhat) + ADAM_EPS)).astype(p.dtype)
    elif kind == "sgd":
        for name, g in grads.items():
            p = tensors[name]
            slot = state["slots"].setdefault(name, {"vel": np.zeros_like(p)})
            slot["vel"][...] = momentum * slot["vel"] + g
            p -= (lr * slot["vel"]).astype(p.dtype)
    else:
        raise ConfigError(f"unknown optimizer {kind!r}")


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def train(spec, dataset, cfg, log=None):
    """Train a model; with at_steps > 0 every batch is replaced by its
    PGD-crafted counterpart before the update (inference-mode batch norm
    during the inner attack, train mode for the update step).

    Returns (params, history) where history holds one dict per epoch.
    """
    if not len(dataset):
        raise ConfigError("dataset is empty")
    init_rng = np.random.default_rng([cfg.seed, 0])
    data_rng = np.random.default_rng([cfg.seed, 1])
    params = init_model(spec, init_rng)
    tensors = {k: v for k, v in named_arrays(params).items() if is_trainable(k)}
    state = init_optimizer_state()

    X_all = dataset.points_array().astype(np.float32)
    y_all = dataset.labels_array()
    N = X_all.shape[0]
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        lr = cfg.lr * (0.5 ** (epoch // cfg.lr_halve_every))
        order = data_rng.permutation(N)
        losses = []
        t0 = time.perf_counter()
        for b_start in range(0, N, cfg.batch_size):
            idx = order[b_start:b_start + cfg.batch_size]
            if idx.size < 2:
                continue  # batch norm needs at least two rows
            Xb = X_all[idx]
            yb = y_all[idx]
            if cfg.at_steps > 0:
                attack_rng = np.random.default_rng([cfg.seed, 2, epoch, b_start])
                acfg = attacks.LinfAttackConfig(
                    cfg.at_epsilon, cfg.at_steps, random_start=cfg.at_random_start)
                outs = attacks.pgd_linf(Classifier(spec, params), Xb, yb, acfg,
                                        rng=attack_rng)
                Xb = np.stack([o.adversarial for o in outs])
            loss, _, _, grads = loss_and_grads(spec, params, Xb, yb, train=True)
            optimizer_step(cfg.optimizer, tensors, grads, state, lr, cfg.momentum)
            losses.append(loss)
            step += 1
        row = {"epoch": epoch, "loss": float(np.mean(losses)), "lr": lr,
               "seconds": time.perf_counter() - t0}
        history.append(row)
        if log:
            log(row)
    return params, history, data_rng


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class AttackPlan:
    kind: str                      # fgsm|bim|pgd|mim|pgd_l2|cw|spsa|nes|evolution|adaptive|gather
    epsilon: float = 0.05
    steps: int = 200
    delta: float = 0.16
    queries: int = 2000
    target: int | None = None      # cw only; None picks the next class
    label: str = ""

    def name(self):
        if self.label:
            return self.label
        if self.kind in ("pgd", "bim", "fgsm", "mim", "adaptive", "gather",
                         "spsa", "nes", "evolution"):
            return f"{self.kind}(eps={self.epsilon},T={self.steps})"
        if self.kind == "pgd_l2":
            return f"pgd_l2(delta={self.delta},T={self.steps})"
        return self.kind


@dataclass
class EvalReport:
    n_samples: int
    nominal_accuracy: float
    per_class: dict
    adversarial: dict = field(default_factory=dict)   # name -> metrics dict


def _predict_chunked(model, X, chunk=64):
    preds = []
    for i in range(0, X.shape[0], chunk):
        logits = np.atleast_2d(model.logits(X[i:i + chunk]))
        preds.append(np.argmax(logits, axis=1))
    return np.concatenate(preds)


def _run_plan(model, plan, X, y, seeds, threads):
    B = X.shape[0]
    if plan.kind in ("pgd", "bim"):
        cfg = attacks.LinfAttackConfig(plan.epsilon, plan.steps,
                                       random_start=plan.kind == "pgd",
                                       step_rule=plan.kind)
        return attacks.pgd_linf(model, X, y, cfg, seeds=seeds)
    if plan.kind == "fgsm":
        return attacks.fgsm(model, X, y, plan.epsilon)
    if plan.kind == "mim":
        return attacks.mim(model, X, y, plan.epsilon, plan.steps)
    if plan.kind == "pgd_l2":
        cfg = attacks.L2AttackConfig(plan.delta, plan.steps)
        return attacks.pgd_l2(model, X, y, cfg, seeds=seeds)
    if plan.kind in ("adaptive", "gather"):
        cfg = attacks.LinfAttackConfig(plan.epsilon, plan.steps)
        objective = "adaptive" if plan.kind == "adaptive" else "gather_only"
        return attacks.gather_adaptive_attack(model, X, y, cfg, objective=objective,
                                              seeds=seeds)
    if plan.kind == "cw":
        def one_cw(i):
            target = plan.target if plan.target is not None else int(
                (y[i] + 1) % np.atleast_2d(model.logits(X[i])).shape[1])
            return attacks.cw_l2_targeted(model, X[i], target, attacks.CWConfig(target))
        if threads > 1:
            with ThreadPoolExecutor(threads) as pool:
                return list(pool.map(one_cw, range(B)))
        return [one_cw(i) for i in range(B)]
    if plan.kind in ("spsa", "nes", "evolution"):
        cfg = attacks.BlackBoxConfig(plan.kind, plan.epsilon, query_budget=plan.queries)
        runner = (attacks.evolution_attack if plan.kind == "evolution"
                  else attacks.score_blackbox_attack)

        def one_bb(i):
            return runner(model, X[i], y[i], cfg, rng=np.random.default_rng(seeds[i]))
        if threads > 1:
            with ThreadPoolExecutor(threads) as pool:
                return list(pool.map(one_bb, range(B)))
        return [one_bb(i) for i in range(B)]
    raise ConfigError(f"unknown attack kind {plan.kind!r}")


def evaluate(model, dataset, plans=(), seed=0, threads=1, attack_chunk=64):
    """Nominal accuracy plus adversarial accuracy for each attack plan.

    Each sample's attack is seeded with seed XOR sample-index, so parallel
    and serial runs agree.
    """
    X = dataset.points_array().astype(np.float32)
    y = dataset.labels_array()
    N = X.shape[0]
    preds = _predict_chunked(model, X)
    nominal = float((preds == y).mean())
    per_class = {}
    for c in np.unique(y):
        sel = y == c
        name = dataset.class_names[c] if c < len(dataset.class_names) else str(c)
        per_class[name] = float((preds[sel] == c).mean())
    report = EvalReport(N, nominal, per_class)
    all_seeds = [seed ^ i for i in range(N)]
    for plan in plans:
        outcomes = []
        for i in range(0, N, attack_chunk):
            chunk_out = _run_plan(model, plan, X[i:i + attack_chunk],
                                  y[i:i + attack_chunk],
                                  all_seeds[i:i + attack_chunk], threads)
            outcomes.extend(chunk_out if isinstance(chunk_out, list) else [chunk_out])
        if plan.kind == "cw":
            # targeted: success means reaching the target class
            adv_acc = float(np.mean([not o.success for o in outcomes]))
        else:
            adv_preds = np.array([not o.success for o in outcomes])
            adv_acc = float(adv_preds.mean())
        succ = [o for o in outcomes if o.success]
        report.adversarial[plan.name()] = {
            "accuracy": adv_acc,
            "success_rate": float(np.mean([o.success for o in outcomes])),
            "mean_l2": float(np.mean([o.l2 for o in succ])) if succ else 0.0,
            "mean_linf": float(np.mean([o.linf for o in succ])) if succ else 0.0,
        }
    return report


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"PCRW"
CHECKPOINT_VERSION = 1
SPEC_TENSOR = "spec.json"


@dataclass
class Checkpoint:
    spec: BackboneSpec
    params: object
    step: int
    rng_state: bytes


def rng_state_bytes(rng):
    """32 bytes capturing a PCG64 generator (state and increment)."""
    st = rng.bit_generator.state["state"]
    return st["state"].to_bytes(16, "little") + st["inc"].to_bytes(16, "little")


def rng_from_state(raw):
    bg = np.random.PCG64()
    bg.state = {"bit_generator": "PCG64",
                "state": {"state": int.from_bytes(raw[:16], "little"),
                          "inc": int.from_bytes(raw[16:], "little")},
                "has_uint32": 0, "uinteger": 0}
    return np.random.Generator(bg)


def _spec_to_json(spec):
    import json
    d = dataclasses.asdict(spec)
    return json.dumps(d, sort_keys=True)


def _spec_from_json(text):
    import json
    d = json.loads(text)
    pool = d.pop("pool")
    pool["mlp_widths"] = tuple(pool["mlp_widths"])
    return BackboneSpec(pool=PoolSpec(**pool), **d)


def save_checkpoint(path, spec, params, step=0, rng_state=b"\x00" * 32):
    """Little-endian binary: magic, u32 version, u32 tensor count, tensors
    (u16 name length + name, u8 rank, u32 dims, float32 data), u64 step,
    32-byte RNG state. The model spec rides along as a float32-encoded JSON
    tensor so a checkpoint is self-describing."""
    tensors = dict(named_arrays(params))
    spec_bytes = _spec_to_json(spec).encode("utf-8")
    tensors[SPEC_TENSOR] = np.frombuffer(spec_bytes, dtype=np.uint8).astype(np.float32)
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(tensors)))
    for name, arr in tensors.items():
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    buf.write(struct.pack("<Q", step))
    if len(rng_state) != 32:
        raise ValueError("rng_state must be exactly 32 bytes")
    buf.write(rng_state)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _read_exact(fh, count, what):
    data = fh.read(count)
    if len(data) != count:
        raise TruncatedFileError(f"checkpoint ended while reading {what}")
    return data


def load_checkpoint(path):
    """Read a checkpoint back into (spec, params, step, rng_state)."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise BadMagicError(f"bad checkpoint magic {magic!r}")
        version, count = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if version != CHECKPOINT_VERSION:
            raise VersionMismatchError(f"unsupported checkpoint version {version}")
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(fh, 1, "rank"))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "dims"))
            size = int(np.prod(dims)) if rank else 1
            raw = _read_exact(fh, 4 * size, f"tensor {name}")
            tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
        (step,) = struct.unpack("<Q", _read_exact(fh, 8, "step"))
        rng_state = _read_exact(fh, 32, "rng state")
    if SPEC_TENSOR not in tensors:
        raise ShapeMismatchOnLoadError("checkpoint carries no model spec")
    spec_bytes = tensors.pop(SPEC_TENSOR).astype(np.uint8).tobytes()
    spec = _spec_from_json(spec_bytes.decode("utf-8"))
    params = init_model(spec, np.random.default_rng(0))
    slots = named_arrays(params)
    if set(slots) != set(tensors):
        missing = set(slots) ^ set(tensors)
        raise ShapeMismatchOnLoadError(f"tensor names do not match spec: {sorted(missing)}")
    for name, arr in tensors.items():
        if slots[name].shape != arr.shape:
            raise ShapeMismatchOnLoadError(
                f"{name}: checkpoint shape {arr.shape} != spec shape {slots[name].shape}")
        slots[name][...] = arr
    return Checkpoint(spec, params, step, rng_state)
