"""The full tracker network: toy encoder, QEM, coarse/fine feature layers, detection head, DA heads."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import numcore as nc
from .attention import CrossAttentionLayer, Mlp2, Module, normalize_rows
from .da import AssociationMatrix, DAModule, raw_association
from .numcore import Tensor
from .qem import QueryEnhancer
from .simworld import CLASSES, RAW_DIM

MODES = ("lidar_only", "fusion")
DET_REG_DIM = 6  # position (2), size (2), heading sin/cos (2)


@dataclass
class ModelConfig:
    d: int = 32
    hidden: int = 64
    mode: str = "lidar_only"
    use_qem: bool = True
    use_transformer_da: bool = True
    r_gate: float = 2.0
    spawn_threshold: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


@dataclass
class PrevObjects:
    """Previous-frame objects as seen by the QEM and the DA heads."""

    positions: np.ndarray      # P x 2, metres
    headings: np.ndarray       # P
    qin: Tensor
    qfeat: Tensor
    qfine: Optional[Tensor] = None

    @property
    def count(self) -> int:
        return self.positions.shape[0]


@dataclass
class FrameFeatures:
    qin: Tensor
    qenh: Tensor
    qfeat: Tensor
    qfine: Optional[Tensor]
    newborn: np.ndarray


def gate_qem(curr_positions, prev_positions, r_gate: float) -> np.ndarray:
    """True for current detections farther than ``r_gate`` from every previous object."""
    curr = np.asarray(curr_positions, dtype=np.float64).reshape(-1, 2)
    prev = np.asarray(prev_positions, dtype=np.float64).reshape(-1, 2)
    if prev.shape[0] == 0:
        return np.ones(curr.shape[0], dtype=bool)
    if curr.shape[0] == 0:
        return np.zeros(0, dtype=bool)
    dist = np.sqrt(((curr[:, None, :] - prev[None, :, :]) ** 2).sum(axis=2))
    return dist.min(axis=1) > r_gate


class MotionTrack(Module):
    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        d, h = config.d, config.hidden
        self.encoder = Mlp2(RAW_DIM, h, d, rng)
        self.qem = QueryEnhancer(d, rng)
        self.coarse = CrossAttentionLayer(d, rng)
        self.fine = CrossAttentionLayer(d, rng)
        self.det_head = Mlp2(d, h, DET_REG_DIM + len(CLASSES), rng)
        self.da = DAModule(d, h, rng)
        self.da_fine = DAModule(d, h, rng)

    # groups used by the staged training
    def group(self, name: str) -> dict[str, Tensor]:
        prefixes = {
            "encoder": ("encoder.",),
            "detector": ("coarse.", "det_head.") + (("fine.",) if self.fusion else ()),
            "qem": ("qem.",),
            "da": ("da.",) + (("da_fine.",) if self.fusion else ()),
        }[name]
        return {k: v for k, v in self.named_parameters().items() if k.startswith(prefixes)}

    @property
    def fusion(self) -> bool:
        return self.config.mode == "fusion"

    def frame_features(self, raw: np.ndarray, positions: np.ndarray,
                       prev: Optional[PrevObjects], use_qem: Optional[bool] = None) -> FrameFeatures:
        use_qem = self.config.use_qem if use_qem is None else use_qem
        m = raw.shape[0]
        d = self.config.d
        if m == 0:
            empty = Tensor(np.zeros((0, d)))
            return FrameFeatures(empty, empty, empty, empty if self.fusion else None, np.zeros(0, bool))
        qin = normalize_rows(self.encoder(Tensor(raw)))
        newborn = np.ones(m, dtype=bool)
        qenh = qin
        if use_qem and prev is not None and prev.count > 0:
            newborn = gate_qem(positions, prev.positions, self.config.r_gate)
            feats = prev.qfine if self.fusion and prev.qfine is not None else prev.qfeat
            enhanced = self.qem(qin, feats, newborn)
            qenh = enhanced.embeddings
        qfeat = self.coarse(qenh, qenh)
        qfine = self.fine(qfeat, qfeat) if self.fusion else None
        return FrameFeatures(qin, qenh, qfeat, qfine, newborn)

    def detect(self, feats: FrameFeatures) -> Tensor:
        """Detection head output: 6 regression values then class logits, per query."""
        src = feats.qfine if self.fusion else feats.qfeat
        return self.det_head(src)

    def association(self, prev: PrevObjects, curr: FrameFeatures,
                    use_transformer: Optional[bool] = None) -> tuple[AssociationMatrix, Optional[AssociationMatrix]]:
        use_transformer = self.config.use_transformer_da if use_transformer is None else use_transformer
        if use_transformer:
            coarse = self.da(prev.qfeat, prev.qin, prev.headings, curr.qin)
            fine = None
            if self.fusion:
                fine = self.da_fine(prev.qfine, nc.concat_rows([prev.qin, prev.qfeat]),
                                    prev.headings, curr.qin)
        else:
            # both DA transforms bypassed: track features meet untouched query inputs
            coarse = raw_association(prev.qfeat, curr.qin)
            fine = raw_association(prev.qfine, curr.qin) if self.fusion else None
        return coarse, fine

    # checkpoint helpers
    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise KeyError(f"checkpoint mismatch: missing {missing}, unexpected {extra}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"parameter {k}: checkpoint shape {arr.shape} != model {p.shape}")
            p.data = arr.copy()

    def config_dict(self) -> dict:
        return dataclasses.asdict(self.config)
