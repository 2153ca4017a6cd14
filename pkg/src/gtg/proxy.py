"""Rank-reweighted forward surrogate and top-Q candidate filtering."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from scipy.stats import rankdata, spearmanr
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import OfflineDataset, normalize_designs
from .denoiser import TrainConfig, TrainingError
from .tasks import CandidateSet

logger = logging.getLogger(__name__)

DEFAULT_RANK_K = 0.01


@dataclass(frozen=True)
class RankWeights:
    weights: np.ndarray
    k: float


def rank_weights(scores, k: float = DEFAULT_RANK_K) -> RankWeights:
    """Weights proportional to 1 / (k N + rank), rescaled to sum to N.

    Ranks are dense, 0 for the best score; tied scores share a rank.
    """
    if not k > 0:
        raise ValueError(f"k must be > 0, got {k}")
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    n = scores.size
    if n < 1:
        raise ValueError("need at least one score")
    ranks = rankdata(-scores, method="dense") - 1.0
    raw = 1.0 / (k * n + ranks)
    return RankWeights(weights=raw * (n / raw.sum()), k=k)


@dataclass(frozen=True)
class ProxyArch:
    dim: int
    hidden: tuple[int, ...] = (1024, 1024)


class ProxyNet(nn.Module):
    def __init__(self, arch: ProxyArch):
        super().__init__()
        self.arch = arch
        layers: list[nn.Module] = []
        width = arch.dim
        for units in arch.hidden:
            layers += [nn.Linear(width, units), nn.ReLU()]
            width = units
        layers.append(nn.Linear(width, 1))
        self.layers = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.layers(x).squeeze(-1)


@dataclass
class ProxyModel:
    """Regressor from scaled designs to normalized scores.

    Holds the design/score normalization of the dataset it was fit on, so
    ``predict`` takes raw designs.
    """

    net: ProxyNet
    x_min: np.ndarray
    x_max: np.ndarray
    metadata: dict = field(default_factory=dict)

    def _scale(self, designs) -> np.ndarray:
        span = np.where(self.x_max > self.x_min, self.x_max - self.x_min, 1.0)
        return 2.0 * (np.asarray(designs, dtype=np.float64) - self.x_min) / span - 1.0

    def predict(self, designs) -> np.ndarray:
        designs = np.asarray(designs, dtype=np.float64)
        if designs.ndim == 1:
            designs = designs[None]
        dtype = next(self.net.parameters()).dtype
        with torch.no_grad():
            out = self.net(torch.as_tensor(self._scale(designs), dtype=dtype))
        return out.numpy().astype(np.float64)

    def save(self, path) -> None:
        header = {
            "kind": "proxy",
            "arch": {"dim": self.net.arch.dim, "hidden": list(self.net.arch.hidden)},
            "x_min": self.x_min.tolist(),
            "x_max": self.x_max.tolist(),
            "metadata": self.metadata,
        }
        arrays = {k: v.detach().cpu().numpy() for k, v in self.net.state_dict().items()}
        save_checkpoint(path, header, arrays)

    @classmethod
    def load(cls, path) -> "ProxyModel":
        header, arrays = load_checkpoint(path)
        if header.get("kind") != "proxy":
            raise ValueError(f"{path}: not a proxy checkpoint")
        arch = ProxyArch(dim=header["arch"]["dim"], hidden=tuple(header["arch"]["hidden"]))
        dtype = torch.float64 if header["dtype"] == ["float64"] else torch.float32
        net = ProxyNet(arch).to(dtype)
        net.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in arrays.items()})
        return cls(
            net=net,
            x_min=np.asarray(header["x_min"], dtype=np.float64),
            x_max=np.asarray(header["x_max"], dtype=np.float64),
            metadata=header.get("metadata", {}),
        )


def split_indices(n: int, seed: int, val_fraction: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    n_val = max(1, int(round(n * val_fraction)))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def train_proxy(
    ds: OfflineDataset,
    cfg: TrainConfig,
    weights: RankWeights | None = None,
    hidden: tuple[int, ...] = (1024, 1024),
    split_seed: int = 0,
    weighted: bool = True,
) -> tuple[ProxyModel, dict]:
    """Fit the proxy by weighted squared error on a 90/10 split.

    Weights are computed on the training rows when ``weights`` is None;
    pass ``RankWeights`` over the full dataset to override them. Returns
    the model and a validation report (RMSE, Spearman, split seed).
    """
    cfg.validate()
    if ds.n < 10:
        raise ValueError(f"proxy training needs N >= 10, got {ds.n}")
    train_rows, val_rows = split_indices(ds.n, split_seed)
    x = normalize_designs(ds, ds.designs)
    y = ds.normalized_scores
    if not weighted:
        w = np.ones(train_rows.size)
        k = None
    elif weights is None:
        w = rank_weights(y[train_rows]).weights
        k = DEFAULT_RANK_K
    else:
        if weights.weights.shape[0] != ds.n:
            raise ValueError("weights must cover every dataset row")
        w = weights.weights[train_rows]
        k = weights.k

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        net = ProxyNet(ProxyArch(dim=ds.dim, hidden=tuple(hidden)))
    xt = torch.as_tensor(x[train_rows], dtype=torch.float32)
    yt = torch.as_tensor(y[train_rows], dtype=torch.float32)
    wt = torch.as_tensor(w, dtype=torch.float32)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate, betas=(0.9, 0.999))
    curve = []
    running = 0.0
    for step in range(1, cfg.train_steps + 1):
        rows = torch.randint(0, xt.shape[0], (min(cfg.batch_size, xt.shape[0]),), generator=gen)
        pred = net(xt[rows])
        loss = (wt[rows] * (pred - yt[rows]) ** 2).mean()
        if not torch.isfinite(loss):
            raise TrainingError(step, f"non-finite proxy loss {loss.item()}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        running += loss.item()
        if step % cfg.log_every == 0 or step == cfg.train_steps:
            span = cfg.log_every if step % cfg.log_every == 0 else step % cfg.log_every
            curve.append((step, running / span))
            running = 0.0
    net.eval()

    model = ProxyModel(net=net, x_min=ds.x_min.copy(), x_max=ds.x_max.copy())
    val_pred = model.predict(ds.designs[val_rows])
    val_true = y[val_rows]
    rmse = float(np.sqrt(np.mean((val_pred - val_true) ** 2)))
    rho = float(spearmanr(val_pred, val_true).statistic) if val_rows.size > 1 else float("nan")
    report = {
        "val_rmse": rmse,
        "val_spearman": rho,
        "n_train": int(train_rows.size),
        "n_val": int(val_rows.size),
        "split_seed": split_seed,
        "rank_k": k,
        "weighted": weighted,
        "train": asdict(cfg),
    }
    model.metadata = {"validation": report, "loss_curve": curve}
    logger.info("proxy: val RMSE %.4f, Spearman %.4f", rmse, rho)
    return model, report


def filter_top_q(cands: CandidateSet, proxy: ProxyModel, q: int) -> CandidateSet:
    """The ``q`` candidates with the highest proxy predictions, best first.

    Ties keep insertion order. Predictions are recorded on the result.
    """
    if q < 1:
        raise ValueError(f"Q must be >= 1, got {q}")
    if len(cands) == 0:
        raise ValueError("no candidates to filter")
    preds = proxy.predict(cands.designs)
    order = np.argsort(-preds, kind="stable")[: min(q, len(cands))]
    scored = CandidateSet(
        designs=cands.designs,
        proxy_scores=preds,
        oracle_scores=cands.oracle_scores,
        provenance=cands.provenance,
        meta=dict(cands.meta),
    )
    return scored.take(order)
