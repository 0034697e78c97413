"""Two-step pipeline: self-supervised pre-fine-tune, then fused target training.

Step 1 trains the global-attention encoder (with a one-layer decoder) by
masked-token reconstruction and the windowed encoder by in-batch InfoNCE
on two augmented views, both on the pre-fine-tune domain.

Step 2 encodes target images with both encoders, fuses the feature maps
(or, with fusion off, keeps the windowed features alone), mean-pools, and
trains a linear classifier jointly with every upstream weight.

Optimisation is plain SGD throughout.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import backbones as bb
from .. import fusion, layers, ssl
from .. import tensor as T
from ..errors import NumericError
from . import checkpoint
from .checkpoint import Checkpoint
from .config import ExperimentConfig
from .data import NUM_CLASSES, Domain, gen_dataset

log = logging.getLogger(__name__)

PRETRAIN_DOMAINS = {"matched": Domain.TASK_B, "mismatched": Domain.MISMATCHED}


def sgd(params: dict, grads: dict, lr: float) -> dict:
    return {k: v - lr * grads[k] if k in grads else v for k, v in params.items()}


def _prefixed(prefix: str, d: dict) -> dict:
    return {prefix + k: v for k, v in d.items()}


def _require_finite(value: float, what: str) -> None:
    if not np.isfinite(value):
        raise NumericError(f"{what} diverged (value {value})")


def init_checkpoints(config: ExperimentConfig, seed: int | None = None) -> tuple[Checkpoint, Checkpoint]:
    """Freshly initialised (global encoder + decoder, windowed encoder) pair."""
    genc = bb.init_encoder(config.encoder_config(0), config.rng("global_init", seed))
    dec = bb.init_decoder(config.encoder_config(0), config.rng("decoder_init", seed))
    wenc = bb.init_encoder(config.encoder_config(config.window), config.rng("windowed_init", seed))
    h = config.digest()
    g = Checkpoint({**_prefixed("encoder.", genc.tensors), **_prefixed("decoder.", dec.tensors)}, h)
    w = Checkpoint(_prefixed("encoder.", wenc.tensors), h)
    return g, w


def reconstruction_step(genc, dec, images, masks):
    """Masked-token reconstruction loss per image (batch mean), with grads.

    Gradients are taken of the loss divided by the number of reconstructed
    pixel values, i.e. a per-pixel mean; the summed loss is too steep for
    plain SGD at the configured learning rate.
    """
    b = images.shape[0]
    feats, enc_cache = bb.encode_cached(genc, images, masks)
    pixels, dec_cache = bb.reconstruct_cached(dec, feats)
    loss, g_pixels = ssl.reconstruction_loss(pixels, bb.patchify(images, genc.config.patch), masks)
    n_values = int(np.count_nonzero(masks)) * pixels.shape[-1]
    dec_grads, g_feats = bb.reconstruct_backward(dec, dec_cache, g_pixels / n_values)
    enc_grads, _ = bb.encode_backward(genc, enc_cache, g_feats)
    return loss / b, enc_grads, dec_grads


def contrastive_step(wenc, view1, view2, tau):
    z1, c1 = bb.embed_cached(wenc, view1)
    z2, c2 = bb.embed_cached(wenc, view2)
    loss, g1, g2 = ssl.batch_info_nce(z1, z2, tau)
    grads1, _ = bb.embed_backward(wenc, c1, g1)
    grads2, _ = bb.embed_backward(wenc, c2, g2)
    return loss, {k: grads1[k] + grads2[k] for k in grads1}


def augment_batch(images: np.ndarray, rng: np.random.Generator):
    v1 = np.empty_like(images)
    v2 = np.empty_like(images)
    for i, img in enumerate(images):
        v1[i] = ssl.augment(img, rng)
        v2[i] = ssl.augment(img, rng)
    return v1, v2


def pretrain(config: ExperimentConfig, seed: int | None = None, domain: str | None = None):
    """Self-supervised pre-fine-tune of both encoders.

    Returns ``(global_ckpt, windowed_ckpt, history)`` where ``history`` holds
    ``(step, reconstruction_loss, contrastive_loss)`` rows.  The
    reconstruction loss is the masked-token squared error summed per image,
    averaged over the batch.  Domain ``"none"`` returns the fresh
    initialisation untouched with an empty history.
    """
    seed = config.seed if seed is None else seed
    domain = config.prefinetune_domain if domain is None else domain
    g_ckpt, w_ckpt = init_checkpoints(config, seed)
    if domain == "none":
        return g_ckpt, w_ckpt, []

    data = gen_dataset(PRETRAIN_DOMAINS[domain], config.pretrain_size, config.component_seed("pretrain_data", seed))
    gcfg = config.encoder_config(0)
    genc = bb.EncoderParams(gcfg, g_ckpt.subset("encoder."))
    dec = bb.DecoderParams(gcfg, g_ckpt.subset("decoder."))
    wenc = bb.EncoderParams(config.encoder_config(config.window), w_ckpt.subset("encoder."))
    rng_r = config.rng("step1_reconstruction", seed)
    rng_c = config.rng("step1_contrastive", seed)
    n, b, lr = len(data), min(config.batch_size, len(data)), config.lr_step1

    history = []
    for step in range(1, config.step1_steps + 1):
        imgs = data.images[rng_r.choice(n, size=b, replace=False)]
        masks = ssl.random_masks(b, gcfg.num_tokens, config.mask_ratio, rng_r)
        rec_loss, enc_g, dec_g = reconstruction_step(genc, dec, imgs, masks)
        _require_finite(rec_loss, "reconstruction loss")
        genc = bb.EncoderParams(gcfg, sgd(genc.tensors, enc_g, lr))
        dec = bb.DecoderParams(gcfg, sgd(dec.tensors, dec_g, lr))

        v1, v2 = augment_batch(data.images[rng_c.choice(n, size=b, replace=False)], rng_c)
        con_loss, win_g = contrastive_step(wenc, v1, v2, config.tau)
        _require_finite(con_loss, "contrastive loss")
        wenc = bb.EncoderParams(wenc.config, sgd(wenc.tensors, win_g, lr))
        history.append((step, rec_loss, con_loss))

    h = config.digest()
    g_ckpt = Checkpoint({**_prefixed("encoder.", genc.tensors), **_prefixed("decoder.", dec.tensors)}, h)
    w_ckpt = Checkpoint(_prefixed("encoder.", wenc.tensors), h)
    if history:
        log.info("step1 seed=%d domain=%s final rec=%.4f con=%.4f", seed, domain, history[-1][1], history[-1][2])
    return g_ckpt, w_ckpt, history


def run_step1(
    config: ExperimentConfig,
    out_dir: str | Path | None = None,
    seed: int | None = None,
    domain: str | None = None,
) -> tuple[Checkpoint, Checkpoint]:
    """:func:`pretrain`, plus loss-curve CSV and checkpoints under ``out_dir``."""
    g_ckpt, w_ckpt, history = pretrain(config, seed, domain)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "step1_losses.csv", ("step", "reconstruction_loss", "contrastive_loss"), history)
        checkpoint.save(g_ckpt, out / "global_encoder.ckpt")
        checkpoint.save(w_ckpt, out / "windowed_encoder.ckpt")
    return g_ckpt, w_ckpt


@dataclass
class Classifier:
    """Everything trained in step 2, as one flat tensor dict."""

    config: ExperimentConfig
    tensors: dict

    def encoder(self, name: str) -> bb.EncoderParams:
        window = 0 if name == "global" else self.config.window
        return bb.EncoderParams(self.config.encoder_config(window), _subset(self.tensors, name + "."))


def _subset(d: dict, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in d.items() if k.startswith(prefix)}


def build_classifier(config: ExperimentConfig, g_ckpt: Checkpoint, w_ckpt: Checkpoint, seed: int | None = None) -> Classifier:
    c = config.channels
    t = _prefixed("windowed.", w_ckpt.subset("encoder."))
    if config.fusion_on:
        t.update(_prefixed("global.", g_ckpt.subset("encoder.")))
        t.update(_prefixed("fusion.", fusion.init_fusion_params(c, config.ffn_hidden, config.rng("fusion_init", seed))))
    rng = config.rng("head_init", seed)
    t["head.W"] = layers.uniform_weight(rng, (c, NUM_CLASSES), c)
    t["head.b"] = np.zeros(NUM_CLASSES)
    t.pop("global.mask_token", None)
    return Classifier(config, t)


def classifier_forward(model: Classifier, images: np.ndarray):
    """Logits and the cache needed by :func:`classifier_backward`."""
    t = model.tensors
    wenc = model.encoder("windowed")
    xs, ws_cache = bb.encode_cached(wenc, images)
    if model.config.fusion_on:
        genc = model.encoder("global")
        xv, gv_cache = bb.encode_cached(genc, images)
        feats, f_cache = fusion.fusion_block(_subset(t, "fusion."), xs, xv)
    else:
        gv_cache = f_cache = None
        feats = xs
    pooled = bb.mean_pool(feats)
    logits = T.matmul(pooled, t["head.W"]) + t["head.b"]
    return logits, (ws_cache, gv_cache, f_cache, feats.shape, pooled)


def classifier_backward(model: Classifier, cache, g_logits: np.ndarray) -> dict:
    t = model.tensors
    ws_cache, gv_cache, f_cache, shape, pooled = cache
    grads = {"head.b": g_logits.sum(axis=0)}
    g_pooled, grads["head.W"] = T.matmul_backward(g_logits, pooled, t["head.W"])
    g_feats = bb.mean_pool_backward(g_pooled, shape)
    if model.config.fusion_on:
        xs, xv = f_cache[0], f_cache[1]
        fg, g_xs, g_xv = fusion.fusion_block_backward(_subset(t, "fusion."), xs, xv, g_feats, cache=f_cache)
        grads.update(_prefixed("fusion.", fg))
        gg, _ = bb.encode_backward(model.encoder("global"), gv_cache, g_xv)
        grads.update(_prefixed("global.", gg))
    else:
        g_xs = g_feats
    wg, _ = bb.encode_backward(model.encoder("windowed"), ws_cache, g_xs)
    grads.update(_prefixed("windowed.", wg))
    return grads


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    b = logits.shape[0]
    probs = T.softmax(logits, axis=-1)
    shift = logits.max(axis=-1)
    lse = shift + np.log(np.exp(logits - shift[:, None]).sum(axis=-1))
    loss = float((lse - logits[np.arange(b), labels]).mean())
    g = probs.copy()
    g[np.arange(b), labels] -= 1.0
    return loss, g / b


def predict(model: Classifier, images: np.ndarray, batch: int = 256) -> np.ndarray:
    out = [classifier_forward(model, images[i:i + batch])[0].argmax(axis=-1) for i in range(0, len(images), batch)]
    return np.concatenate(out)


@dataclass
class MetricsReport:
    fusion_on: bool
    prefinetune_domain: str
    seed: int
    rows: list = field(default_factory=list)  # (epoch, train_loss, train_acc, val_acc)
    confusion: np.ndarray | None = None
    config_hash: str = ""

    @property
    def final_val_acc(self) -> float:
        return self.rows[-1][3] if self.rows else float("nan")

    def write_csv(self, path: str | Path) -> None:
        _write_csv(path, ("epoch", "train_loss", "train_acc", "val_acc"), self.rows)


def run_step2(
    config: ExperimentConfig,
    checkpoints: tuple[Checkpoint, Checkpoint],
    out_dir: str | Path | None = None,
    seed: int | None = None,
) -> MetricsReport:
    seed = config.seed if seed is None else seed
    train = gen_dataset(Domain.TASK_A, config.train_size, config.component_seed("train_data", seed))
    val = gen_dataset(Domain.TASK_A, config.val_size, config.component_seed("val_data", seed))
    model = build_classifier(config, *checkpoints, seed=seed)
    rng = config.rng("step2_shuffle", seed)
    report = MetricsReport(config.fusion_on, config.prefinetune_domain, seed, config_hash=config.digest())
    b = config.batch_size

    for epoch in range(1, config.step2_epochs + 1):
        order = rng.permutation(len(train))
        loss_sum, correct = 0.0, 0
        for start in range(0, len(order), b):
            idx = order[start:start + b]
            logits, cache = classifier_forward(model, train.images[idx])
            loss, g = cross_entropy(logits, train.labels[idx])
            _require_finite(loss, "classification loss")
            grads = classifier_backward(model, cache, g)
            model = Classifier(config, sgd(model.tensors, grads, config.lr_step2))
            loss_sum += loss * len(idx)
            correct += int((logits.argmax(axis=-1) == train.labels[idx]).sum())
        val_acc = float((predict(model, val.images) == val.labels).mean())
        report.rows.append((epoch, loss_sum / len(train), correct / len(train), val_acc))

    pred = predict(model, val.images)
    conf = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    np.add.at(conf, (val.labels, pred), 1)
    report.confusion = conf
    if not report.rows:
        report.rows.append((0, float("nan"), float("nan"), float((pred == val.labels).mean())))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report.write_csv(out / "step2_metrics.csv")
        _write_csv(out / "confusion.csv", ("true_label", *[f"pred_{k}" for k in range(NUM_CLASSES)]),
                   [(k, *conf[k]) for k in range(NUM_CLASSES)])
        checkpoint.save(Checkpoint(model.tensors, config.digest()), out / "classifier.ckpt")
    return report


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
