"""Caminhos de mimetismo, provedores de features auxiliares e as transformações Ψ/Φ.

Cada caminho liga um nível (baixo, médio, alto) de uma rede auxiliar k a um
tap da rede principal. A rede auxiliar é tratada como fonte congelada de
tensores (N, h, w, C): Ψ a reduz para as dimensões alvo (w, w', c) sem
gradiente, e Φ (conv 1x1 + reamostragem bilinear) leva o tap da rede principal
para as mesmas dimensões.
"""

from __future__ import annotations

import logging
from abc import ABC, abstractmethod

import numpy as np

from fmnet.core import ops
from fmnet.core.container import read_tensor
from fmnet.core.errors import ConfigError, DataError
from fmnet.core.tensor import Tensor, default_dtype
from fmnet.schemas.config import LEVELS, LossWeights, MimicPath, ProviderConfig
from fmnet.schemas.records import Clip
from fmnet.services import data_service

logger = logging.getLogger(__name__)

AUX_CODES = {"psp": "P", "flow": "F"}
LEVEL_CODES = {"low": "L", "middle": "M", "high": "H"}
AUX_LAYERS = {
    "psp": {"low": "res2.out", "middle": "res4.out", "high": "conv6.logits"},
    "flow": {"low": "conv3_1", "middle": "conv4_1", "high": "conv6_1"},
}

# (w, w', c) de cada caminho por conjunto de dados
TARGET_DIMS: dict[str, dict[tuple[str, str], tuple[int, int, int]]] = {
    "udacity": {
        ("flow", "low"): (32, 40, 16),
        ("flow", "middle"): (8, 10, 32),
        ("flow", "high"): (8, 10, 32),
        ("psp", "low"): (30, 30, 16),
        ("psp", "middle"): (30, 30, 16),
        ("psp", "high"): (30, 30, 3),
    },
    "commaai": {
        ("flow", "low"): (12, 20, 32),
        ("flow", "middle"): (12, 20, 32),
        ("flow", "high"): (3, 5, 64),
        ("psp", "low"): (30, 30, 16),
        ("psp", "middle"): (30, 30, 16),
        ("psp", "high"): (30, 30, 3),
    },
}


def path_name(aux_id: str, level: str) -> str:
    return f"{AUX_CODES[aux_id]}{LEVEL_CODES[level]}"


def preset_paths(preset: str, weights: LossWeights | None = None) -> dict[str, MimicPath]:
    """Todos os caminhos de um preset, indexados pelo nome curto (PH, FL, ...)."""
    if preset not in TARGET_DIMS:
        raise ConfigError(f"preset desconhecido: {preset}")
    weights = weights or LossWeights()
    paths: dict[str, MimicPath] = {}
    for (aux_id, level), dims in TARGET_DIMS[preset].items():
        if aux_id not in weights.beta:
            raise ConfigError(f"beta ausente para a rede auxiliar {aux_id!r}")
        name = path_name(aux_id, level)
        paths[name] = MimicPath(
            name=name,
            aux_id=aux_id,
            level=level,
            target_dims=dims,
            beta=weights.beta[aux_id],
            main_tap=level,
            aux_layer=AUX_LAYERS[aux_id][level],
        )
    return paths


def resolve_paths(preset: str, names: list[str], weights: LossWeights | None = None) -> list[MimicPath]:
    """Seleciona caminhos pelo nome, preservando a ordem pedida."""
    available = preset_paths(preset, weights)
    unknown = [name for name in names if name not in available]
    if unknown:
        raise ConfigError(f"caminhos desconhecidos para o preset {preset}: {unknown}")
    if len(set(names)) != len(names):
        raise ConfigError(f"caminhos repetidos: {names}")
    return [available[name] for name in names]


class AuxProvider(ABC):
    """Fonte de features (N, h, w, C) de uma rede auxiliar para os caminhos habilitados."""

    kind: str = "abstract"

    def __init__(self, aux_id: str, paths: list[MimicPath]) -> None:
        self.aux_id = aux_id
        self.paths = [p for p in paths if p.aux_id == aux_id]
        self._shapes: dict[str, tuple[int, ...]] = {}

    @abstractmethod
    def _features(self, clip: Clip, path: MimicPath) -> np.ndarray: ...

    def provide_features(self, clip: Clip) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for path in self.paths:
            features = self._features(clip, path)
            self._check(clip, path, features)
            out[path.name] = features
        return out

    def _check(self, clip: Clip, path: MimicPath, features: np.ndarray) -> None:
        if features.ndim != 4 or features.shape[0] != len(clip):
            raise ConfigError(
                f"{self.kind}/{path.name}: esperado (N={len(clip)}, h, w, C), recebeu {features.shape}"
            )
        if features.shape[-1] % path.channels:
            raise ConfigError(
                f"{self.kind}/{path.name}: {features.shape[-1]} canais não são múltiplo de c={path.channels}"
            )
        seen = self._shapes.setdefault(path.name, features.shape[1:])
        if seen != features.shape[1:]:
            raise ConfigError(
                f"{self.kind}/{path.name}: dimensões mudaram entre clipes ({seen} -> {features.shape[1:]})"
            )


class FixtureProvider(AuxProvider):
    """Lê tensores pré-computados `aux_<k>_<level>` gravados ao lado do clipe."""

    kind = "fixture"

    def _features(self, clip: Clip, path: MimicPath) -> np.ndarray:
        if clip.directory is None:
            if path.name in clip.aux_targets:
                return clip.aux_targets[path.name]
            raise DataError(f"clipe {clip.clip_id} sem diretório nem alvo em memória para {path.name}")
        return read_tensor(clip.directory / path.file_stem)

    def missing(self, clip: Clip) -> list[str]:
        """Caminhos cujo arquivo não existe para `clip`."""
        if clip.directory is None:
            return [p.name for p in self.paths if p.name not in clip.aux_targets]
        return [p.name for p in self.paths if not (clip.directory / p.file_stem).exists()]


class FrozenRandomProvider(AuxProvider):
    """CNN congelada de pesos aleatórios; cada nível é a saída de uma convolução com passo 2.

    A variante de fluxo recebe o quadro concatenado à diferença temporal.
    """

    kind = "frozen-random"
    base_channels = 8

    def __init__(self, aux_id: str, paths: list[MimicPath], seed: int, pool_group: int) -> None:
        super().__init__(aux_id, paths)
        self.pool_group = pool_group
        rng = np.random.default_rng([seed, sorted(AUX_CODES).index(aux_id)])
        by_level = {p.level: p for p in self.paths}
        cin = 6 if aux_id == "flow" else 3
        self.kernels: list[np.ndarray] = []
        for level in LEVELS:
            channels = (by_level[level].channels if level in by_level else self.base_channels) * pool_group
            bound = np.sqrt(6.0 / (9 * cin))
            self.kernels.append(rng.uniform(-bound, bound, size=(3, 3, cin, channels)))
            cin = channels
        self._cache: tuple[str, dict[str, np.ndarray]] | None = None

    def _inputs(self, clip: Clip) -> np.ndarray:
        frames = np.asarray(clip.frames, dtype=np.float64)
        if self.aux_id != "flow":
            return frames
        previous = np.concatenate([frames[:1], frames[:-1]], axis=0)
        return np.concatenate([frames, frames - previous], axis=-1)

    def _levels(self, clip: Clip) -> dict[str, np.ndarray]:
        if self._cache is not None and self._cache[0] == clip.clip_id:
            return self._cache[1]
        x = Tensor.wrap(self._inputs(clip))
        levels: dict[str, np.ndarray] = {}
        for level, kernel in zip(LEVELS, self.kernels):
            x = ops.relu(ops.conv2d(x, Tensor.wrap(kernel), stride=2, pad=1))
            levels[level] = x.data.astype(np.float32)
        self._cache = (clip.clip_id, levels)
        return levels

    def _features(self, clip: Clip, path: MimicPath) -> np.ndarray:
        return self._levels(clip)[path.level]


def _box_blur(maps: np.ndarray, radius: int) -> np.ndarray:
    """Média em janela (2r+1)x(2r+1) com borda replicada sobre (..., h, w)."""
    if radius == 0:
        return maps
    size = 2 * radius + 1
    pad = [(0, 0)] * (maps.ndim - 2) + [(radius, radius), (radius, radius)]
    padded = np.pad(maps, pad, mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, (size, size), axis=(-2, -1))
    return windows.mean(axis=(-2, -1))


class OracleProvider(AuxProvider):
    """Mapas analíticos do cenário sintético, emitidos já nas dimensões alvo.

    psp: one-hot (estrada, faixa, fundo). flow: (du, dv, |d|) em coordenadas de
    imagem normalizadas. Canais além da base são cópias borradas com raio crescente.
    """

    kind = "oracle"

    def _basis(self, clip: Clip, dims: tuple[int, int]) -> np.ndarray:
        if clip.scene is None or clip.params is None:
            raise ConfigError(f"provedor oracle exige cenário analítico; clipe {clip.clip_id} não tem")
        if self.aux_id == "psp":
            return data_service.segmentation_maps(clip.scene, clip.params, dims)
        flow = data_service.flow_fields(clip.scene, clip.params, dims)
        magnitude = np.sqrt(np.sum(flow * flow, axis=-1, keepdims=True))
        return np.concatenate([flow, magnitude], axis=-1)

    def _features(self, clip: Clip, path: MimicPath) -> np.ndarray:
        basis = self._basis(clip, path.spatial)
        nb = basis.shape[-1]
        channels = []
        for i in range(path.channels):
            plane = basis[..., i % nb]
            channels.append(_box_blur(plane, i // nb))
        return np.stack(channels, axis=-1).astype(np.float32)


class ProviderSet:
    """Um provedor por rede auxiliar; junta as features de todos os caminhos."""

    def __init__(self, providers: dict[str, AuxProvider]) -> None:
        self.providers = providers

    def provide_features(self, clip: Clip) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for provider in self.providers.values():
            out.update(provider.provide_features(clip))
        return out

    def missing(self, clip: Clip) -> list[str]:
        names: list[str] = []
        for provider in self.providers.values():
            if isinstance(provider, FixtureProvider):
                names.extend(provider.missing(clip))
        return names


def make_provider(kind: str, aux_id: str, paths: list[MimicPath], config: ProviderConfig) -> AuxProvider:
    if aux_id not in AUX_CODES:
        raise ConfigError(f"rede auxiliar desconhecida: {aux_id}")
    if kind == "fixture":
        return FixtureProvider(aux_id, paths)
    if kind == "frozen-random":
        return FrozenRandomProvider(aux_id, paths, config.frozen_seed, config.pool_group)
    if kind == "oracle":
        return OracleProvider(aux_id, paths)
    raise ConfigError(f"tipo de provedor desconhecido: {kind}")


def build_providers(paths: list[MimicPath], config: ProviderConfig, for_generation: bool = False) -> ProviderSet:
    """Monta os provedores das redes auxiliares usadas por `paths`."""
    kinds = config.generate_with if for_generation else config.kinds
    providers: dict[str, AuxProvider] = {}
    for aux_id in sorted({p.aux_id for p in paths}):
        if aux_id not in kinds:
            raise ConfigError(f"nenhum provedor configurado para a rede auxiliar {aux_id!r}")
        providers[aux_id] = make_provider(kinds[aux_id], aux_id, paths, config)
        logger.info("Provedor %s para %s (%d caminhos)", kinds[aux_id], aux_id,
                    len(providers[aux_id].paths))
    return ProviderSet(providers)


def psi_transform(features: np.ndarray | Tensor, path: MimicPath) -> Tensor:
    """Ψ: média por grupos de canais até c e reamostragem bilinear para (w, w'). Sem gradiente."""
    data = features.data if isinstance(features, Tensor) else np.asarray(features)
    channels = data.shape[-1]
    if channels % path.channels:
        raise ConfigError(f"Ψ de {path.name}: {channels} canais não são múltiplo de c={path.channels}")
    x = Tensor.wrap(data.astype(default_dtype(), copy=False))
    x = ops.avg_pool_channels(x, channels // path.channels)
    return ops.resample(x, path.spatial, mode="bilinear").detach()


class PhiTransform:
    """Φ de cada caminho: conv 1x1 (C_j -> c) com bias seguida de reamostragem bilinear."""

    def __init__(self, paths: list[MimicPath], params: dict[str, Tensor]) -> None:
        self.paths = {p.name: p for p in paths}
        self.params = params

    @classmethod
    def create(cls, paths: list[MimicPath], tap_channels: dict[str, int], seed: int) -> "PhiTransform":
        dtype = default_dtype()
        params: dict[str, Tensor] = {}
        for index, path in enumerate(paths):
            rng = np.random.default_rng([seed, index])
            cin = tap_channels[path.main_tap]
            bound = 1.0 / np.sqrt(cin)
            weight = rng.uniform(-bound, bound, size=(1, 1, cin, path.channels)).astype(dtype)
            params[f"phi.{path.name}.weight"] = Tensor.parameter(weight, f"phi.{path.name}.weight")
            params[f"phi.{path.name}.bias"] = Tensor.parameter(
                np.zeros(path.channels, dtype=dtype), f"phi.{path.name}.bias"
            )
        logger.info("Camadas Φ criadas para %s", [p.name for p in paths])
        return cls(paths, params)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def __call__(self, tap: Tensor, path: MimicPath) -> Tensor:
        weight = self.params[f"phi.{path.name}.weight"]
        bias = self.params[f"phi.{path.name}.bias"]
        return phi_transform(tap, path, weight, bias)


def phi_transform(tap: Tensor, path: MimicPath, weight: Tensor, bias: Tensor) -> Tensor:
    """Φ aplicado a um tap (..., h, w, C_j); devolve (..., w, w', c) diferenciável."""
    if weight.shape[:2] != (1, 1) or weight.shape[-1] != path.channels:
        raise ConfigError(f"peso Φ de {path.name} com forma {weight.shape} inválida")
    projected = ops.conv2d(tap, weight, stride=1, pad=0) + bias
    return ops.resample(projected, path.spatial, mode="bilinear")
