"""A tiny dual-encoder contrastive model.

Both towers are pre-norm transformer stacks with single-head attention.  The
vision tower embeds an ``h x w`` grid of ``f``-feature patches, mean-pools
the token outputs and projects to the shared space; the text tower renders
a category through the template ``a photo of a {}`` and reads the EOS
position.  Every parameter lives in a flat registry keyed by a
hierarchical name whose last component is its kind.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from . import tensor as T
from .errors import ArgumentError, ConfigurationError, DimensionError
from .infer import cosine_scores
from .optim import AdamW
from .tensor import Tensor, no_grad

if TYPE_CHECKING:
    from .peft import LoraModule

BOS, EOS = 0, 1
TEMPLATE_WORDS = {"a": 2, "photo": 3, "of": 4}
N_SPECIAL = 5
# "a photo of a {}"
TEMPLATE_IDS = (TEMPLATE_WORDS["a"], TEMPLATE_WORDS["photo"], TEMPLATE_WORDS["of"], TEMPLATE_WORDS["a"])

LN_KINDS = ("ln_gamma", "ln_beta")
LORA_KINDS = ("w_q", "w_k", "w_v")


def class_token(c: int) -> int:
    return N_SPECIAL + int(c)


def render_template(c: int) -> list[int]:
    """Token ids of ``a photo of a <class c>`` framed by BOS/EOS."""
    return [BOS, *TEMPLATE_IDS, class_token(c), EOS]


@dataclass
class ModelConfig:
    n_blocks: int = 2
    d: int = 32
    mlp_hidden: int = 64
    n_classes: int = 64
    grid: tuple[int, int, int] = (2, 2, 12)
    max_text_len: int = 16
    ln_eps: float = 1e-5
    init_tau: float = 10.0
    seed: int = 0

    @property
    def vocab_size(self) -> int:
        return N_SPECIAL + self.n_classes

    @property
    def n_patches(self) -> int:
        return self.grid[0] * self.grid[1]

    def validate(self) -> None:
        if self.n_blocks < 1 or self.d < 2 or self.mlp_hidden < 1 or self.n_classes < 1:
            raise ConfigurationError("model sizes must be positive (d >= 2)")
        if len(self.grid) != 3 or min(self.grid) < 1:
            raise ConfigurationError(f"bad patch grid {self.grid}")
        if self.max_text_len < len(render_template(0)):
            raise ConfigurationError("max_text_len shorter than the template")
        if self.init_tau <= 0 or self.ln_eps <= 0:
            raise ConfigurationError("init_tau and ln_eps must be positive")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["grid"] = list(self.grid)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        data = dict(data)
        data["grid"] = tuple(data["grid"])
        return cls(**data)


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form size of the registry for ``cfg``."""
    d, h, E = cfg.d, cfg.mlp_hidden, cfg.n_blocks
    block = 4 * d + 4 * (d * d + d) + (d * h + h) + (h * d + d)
    vision = cfg.grid[2] * d + d + cfg.n_patches * d + E * block + 2 * d + d * d
    text = cfg.vocab_size * d + cfg.max_text_len * d + E * block + 2 * d + d * d
    return vision + text + 1


def kind_of(name: str) -> str:
    return name.rsplit(".", 1)[-1]


def tower_of(name: str) -> str:
    return name.split(".", 1)[0]


class DualEncoder:
    """Vision and text towers sharing a d-dimensional unit sphere."""

    def __init__(self, config: ModelConfig, token_codes: np.ndarray | None = None):
        config.validate()
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.lora: dict[str, "LoraModule"] = {}
        self.prompt = None
        self.strategy: str | None = None
        self.lora_merged = False
        self.text_calls = 0
        self._init_params(np.random.default_rng(config.seed), token_codes)

    # -- construction ------------------------------------------------------
    def _add(self, name: str, value) -> None:
        self.params[name] = Tensor(value, name=name)

    def _init_params(self, rng, token_codes) -> None:
        cfg = self.config
        d = cfg.d
        f = cfg.grid[2]

        def dense(n_in, n_out):
            return rng.normal(size=(n_in, n_out)) / math.sqrt(n_in)

        self._add("vision.patch.embed", dense(f, d))
        self._add("vision.patch.bias_embed", np.zeros(d))
        self._add("vision.pos", 0.1 * rng.normal(size=(cfg.n_patches, d)))
        self._init_blocks("vision", rng, dense)
        self._add("vision.ln_final.ln_gamma", np.ones(d))
        self._add("vision.ln_final.ln_beta", np.zeros(d))
        self._add("vision.proj", dense(d, d))

        table = rng.normal(size=(cfg.vocab_size, d))
        if token_codes is not None:
            token_codes = np.asarray(token_codes, dtype=np.float64)
            if token_codes.shape != (cfg.n_classes, d):
                raise DimensionError(f"token codes {token_codes.shape} do not fit ({cfg.n_classes}, {d})")
            table[N_SPECIAL:] = token_codes
        self._add("text.embed", table)
        self._add("text.pos", 0.1 * rng.normal(size=(cfg.max_text_len, d)))
        self._init_blocks("text", rng, dense)
        self._add("text.ln_final.ln_gamma", np.ones(d))
        self._add("text.ln_final.ln_beta", np.zeros(d))
        self._add("text.proj", dense(d, d))

        self._add("logit_scale", math.log(cfg.init_tau))

    def _init_blocks(self, tower, rng, dense) -> None:
        d, hdim = self.config.d, self.config.mlp_hidden
        for i in range(self.config.n_blocks):
            p = f"{tower}.block{i}"
            self._add(f"{p}.ln1.ln_gamma", np.ones(d))
            self._add(f"{p}.ln1.ln_beta", np.zeros(d))
            for w in ("q", "k", "v", "o"):
                self._add(f"{p}.attn.w_{w}", dense(d, d))
                self._add(f"{p}.attn.bias_{w}", np.zeros(d))
            self._add(f"{p}.ln2.ln_gamma", np.ones(d))
            self._add(f"{p}.ln2.ln_beta", np.zeros(d))
            self._add(f"{p}.mlp.mlp_w1", dense(d, hdim))
            self._add(f"{p}.mlp.bias_mlp1", np.zeros(hdim))
            self._add(f"{p}.mlp.mlp_w2", dense(hdim, d) * 0.5)
            self._add(f"{p}.mlp.bias_mlp2", np.zeros(d))

    # -- registry helpers ------------------------------------------------------
    @property
    def tau(self) -> float:
        return float(np.exp(self.params["logit_scale"].data))

    def logit_scale(self) -> Tensor:
        return T.exp(self.params["logit_scale"])

    def named_parameters(self):
        """Registry items plus any injected adapter / prompt tensors."""
        yield from self.params.items()
        for name, mod in self.lora.items():
            yield f"{name}.lora_A", mod.A
            yield f"{name}.lora_B", mod.B
        if self.prompt is not None:
            yield "text.prompt.ctx", self.prompt.ctx

    def set_trainable(self, names) -> None:
        names = set(names)
        for name, p in self.named_parameters():
            p.requires_grad = name in names
            p.grad = None

    def freeze_all(self) -> None:
        self.set_trainable(())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_snapshot(self, snap: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            p.data[...] = snap[name]

    def n_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def registry_hash(self, exclude=()) -> str:
        """sha256 over (name, shape, bytes) of every parameter not in ``exclude``."""
        exclude = set(exclude)
        h = hashlib.sha256()
        for name, p in sorted(self.named_parameters(), key=lambda kv: kv[0]):
            if name in exclude:
                continue
            h.update(name.encode())
            h.update(str(p.data.shape).encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    # -- building blocks -----------------------------------------------------
    def _ln(self, x: Tensor, prefix: str) -> Tensor:
        return T.layer_norm_op(x, self.params[f"{prefix}.ln_gamma"], self.params[f"{prefix}.ln_beta"],
                               self.config.ln_eps)

    def _linear(self, x: Tensor, wname: str, bname: str) -> Tensor:
        out = x @ self.params[wname]
        mod = self.lora.get(wname)
        if mod is not None:
            out = out + mod.delta(x)
        return out + self.params[bname]

    def _block(self, x: Tensor, prefix: str) -> Tensor:
        h = self._ln(x, f"{prefix}.ln1")
        a = f"{prefix}.attn"
        q = self._linear(h, f"{a}.w_q", f"{a}.bias_q")
        k = self._linear(h, f"{a}.w_k", f"{a}.bias_k")
        v = self._linear(h, f"{a}.w_v", f"{a}.bias_v")
        att = T.softmax((q @ k.T) * (1.0 / math.sqrt(self.config.d)))
        x = x + self._linear(att @ v, f"{a}.w_o", f"{a}.bias_o")
        h = self._ln(x, f"{prefix}.ln2")
        m = f"{prefix}.mlp"
        h = T.gelu(self._linear(h, f"{m}.mlp_w1", f"{m}.bias_mlp1"))
        return x + self._linear(h, f"{m}.mlp_w2", f"{m}.bias_mlp2")

    # -- towers ----------------------------------------------------------------
    def image_features(self, images) -> Tensor:
        """Unnormalized vision-tower output for a batch (N, h, w, f)."""
        x = np.asarray(images, dtype=np.float64)
        h, w, f = self.config.grid
        if x.shape[1:] != (h, w, f):
            raise DimensionError(f"images must have shape (N, {h}, {w}, {f}), got {x.shape}")
        tokens = Tensor(x.reshape(x.shape[0], h * w, f))
        p = self.params
        z = tokens @ p["vision.patch.embed"] + p["vision.patch.bias_embed"] + p["vision.pos"]
        for i in range(self.config.n_blocks):
            z = self._block(z, f"vision.block{i}")
        pooled = z.mean(axis=1)
        return self._ln(pooled, "vision.ln_final") @ p["vision.proj"]

    def encode_images(self, images) -> Tensor:
        return T.l2_normalize(self.image_features(images))

    def encode_image(self, x) -> Tensor:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != tuple(self.config.grid):
            raise DimensionError(f"image must have shape {self.config.grid}, got {x.shape}")
        return self.encode_images(x[None])[0]

    def token_ids(self, categories) -> np.ndarray:
        ids = []
        for c in categories:
            c = int(c)
            if not 0 <= c < self.config.n_classes:
                raise ArgumentError(f"unknown category {c}")
            ids.append(render_template(c))
        return np.asarray(ids, dtype=np.int64).reshape(len(ids), -1)

    def _text_tokens(self, categories) -> Tensor:
        ids = self.token_ids(categories)
        p = self.params
        if self.prompt is None:
            x = T.embedding(p["text.embed"], ids)
        else:
            n = ids.shape[0]
            bos = T.embedding(p["text.embed"], ids[:, :1])
            tail = T.embedding(p["text.embed"], ids[:, -2:])
            ctx = T.reshape(self.prompt.ctx, (1,) + self.prompt.ctx.shape)
            ctx = ctx + Tensor(np.zeros((n,) + self.prompt.ctx.shape))
            x = T.concat([bos, ctx, tail], axis=1)
        length = x.shape[1]
        if length > self.config.max_text_len:
            raise DimensionError("text sequence longer than max_text_len")
        return x + p["text.pos"][:length]

    def encode_texts(self, categories) -> Tensor:
        """Unit embeddings for a list of categories, one template render each."""
        categories = list(categories)
        if not categories:
            raise ArgumentError("no categories to encode")
        z = self._text_tokens(categories)
        for i in range(self.config.n_blocks):
            z = self._block(z, f"text.block{i}")
        eos = z[:, -1, :]
        out = self._ln(eos, "text.ln_final") @ self.params["text.proj"]
        self.text_calls += len(categories)
        return T.l2_normalize(out)

    def encode_text(self, c: int) -> Tensor:
        return self.encode_texts([c])[0]

    # -- scoring ------------------------------------------------------------------
    def class_logits(self, images, categories) -> Tensor:
        """tau * cosine between image embeddings and category text embeddings, (N, |C|)."""
        img = self.encode_images(images)
        txt = self.encode_texts(categories)
        return (img @ txt.T) * self.logit_scale()


def zero_shot_predict(x, categories, model: DualEncoder) -> int:
    """argmax over ``categories`` of the image/text cosine; ties go to the lowest id."""
    return int(zero_shot_predict_many(np.asarray(x)[None], categories, model)[0])


def zero_shot_predict_many(images, categories, model: DualEncoder) -> np.ndarray:
    cats = sorted(int(c) for c in categories)
    if not cats:
        raise ArgumentError("empty category set")
    with no_grad():
        img = model.encode_images(images).data
        txt = model.encode_texts(cats).data
    # same scorer as selective inference, so both paths agree bit for bit
    scores = cosine_scores(img, txt, model.tau)
    return np.asarray(cats)[np.argmax(scores, axis=1)]


# -- pretraining -----------------------------------------------------------------
@dataclass
class PretrainConfig:
    steps: int = 1500
    batch: int = 32
    lr: float = 3e-3
    weight_decay: float = 0.01
    max_tau: float = 100.0
    holdout_per_class: int = 8
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)


def contrastive_loss(img: Tensor, txt: Tensor, scale: Tensor) -> Tensor:
    """Symmetric image<->text InfoNCE over a batch of matched pairs."""
    logits = (img @ txt.T) * scale
    targets = np.arange(img.shape[0])
    return (T.cross_entropy(logits, targets) + T.cross_entropy(logits.T, targets)) * 0.5


def pretrain(universe, config: PretrainConfig, classes=None, log=None) -> tuple[DualEncoder, dict]:
    """Contrastive pretraining on ``classes`` (default: the universe's unshifted classes).

    Each step draws ``batch`` distinct classes and one sample from each, so the
    batch holds no false negatives.  The token table stays fixed: class tokens
    keep their semantic codes so that unseen classes remain describable.
    Returns the model (temperature frozen afterwards) and a small report.
    """
    classes = universe.source_classes() if classes is None else sorted(int(c) for c in classes)
    if len(classes) < 2 or any(len(universe.class_indices(c)) < 2 for c in classes):
        raise ConfigurationError("pretraining needs >= 2 classes with >= 2 samples each")
    mcfg = config.model
    if tuple(mcfg.grid) != tuple(universe.grid) or mcfg.n_classes != universe.n_classes:
        raise ConfigurationError("model grid / vocabulary does not match the universe")
    if universe.config.token_dim != mcfg.d:
        raise ConfigurationError("universe token_dim must equal model width d")
    model = DualEncoder(mcfg, token_codes=universe.token_codes)
    trainable = [n for n in model.params if n != "text.embed"]
    model.set_trainable(trainable)
    opt = AdamW([(n, model.params[n]) for n in trainable], lr=config.lr,
                weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    hold = config.holdout_per_class
    by_class = {c: universe.class_indices(c)[:-hold] if hold else universe.class_indices(c)
                for c in classes}
    if any(len(v) < 1 for v in by_class.values()):
        raise ConfigurationError("holdout leaves a class without training samples")
    batch = min(config.batch, len(classes))
    cls_arr = np.asarray(classes)
    max_log = math.log(config.max_tau)

    def draw():
        chosen = np.sort(rng.choice(cls_arr, size=batch, replace=False))
        idx = np.array([rng.choice(by_class[c]) for c in chosen])
        return chosen, idx

    def loss_on(chosen, idx):
        img = model.encode_images(universe.images[idx])
        txt = model.encode_texts(chosen)
        return contrastive_loss(img, txt, model.logit_scale())

    eval_rng_state = rng.bit_generator.state
    probe = draw()
    rng.bit_generator.state = eval_rng_state
    with no_grad():
        initial = loss_on(*probe).item()
    losses = []
    for step in range(config.steps):
        chosen, idx = draw()
        opt.zero_grad()
        loss = loss_on(chosen, idx)
        loss.backward()
        opt.step()
        ls = model.params["logit_scale"]
        ls.data[...] = min(float(ls.data), max_log)
        losses.append(loss.item())
        if log is not None and (step + 1) % 250 == 0:
            log(f"pretrain step {step + 1}/{config.steps} loss {np.mean(losses[-250:]):.4f} tau {model.tau:.2f}")
    with no_grad():
        final = loss_on(*probe).item()
    model.freeze_all()
    report = {"initial_loss": initial, "final_loss": final,
              "train_tail_loss": float(np.mean(losses[-100:])) if losses else initial}
    if hold:
        held = np.concatenate([universe.class_indices(c)[-hold:] for c in classes])
        pred = zero_shot_predict_many(universe.images[held], classes, model)
        report["zero_shot_acc"] = 100.0 * float(np.mean(pred == universe.labels[held]))
        report["chance_acc"] = 100.0 / len(classes)
    model.text_calls = 0
    return model, report
