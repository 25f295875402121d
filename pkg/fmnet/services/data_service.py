"""Dados de direção: gerador procedural de estrada, mapas analíticos e conjuntos em disco.

Câmera pinhole a `CAM_HEIGHT` metros do chão, sem inclinação, com coordenadas
de imagem normalizadas em [0, 1]: u = 0.5 + FOCAL * x / z e
v = HORIZON + FOCAL * CAM_HEIGHT / z. Assim os mapas em qualquer resolução
descrevem a mesma cena.

A estrada segue a trajetória do veículo: com curvatura local k, o eixo da pista
na distância z está em x = k z² / 2. A textura da grama é ancorada no mundo, de
modo que o fluxo ótico analítico corresponde ao deslocamento real dos pixels.
"""

from __future__ import annotations

import json
import logging
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fmnet.core import ops
from fmnet.core.container import read_tensor, write_tensor
from fmnet.core.errors import ConfigError, DataError
from fmnet.core.tensor import Tensor
from fmnet.schemas.config import DataConfig, ScenarioParams
from fmnet.schemas.records import Clip, SceneTrack

logger = logging.getLogger(__name__)

CAM_HEIGHT = 1.5
FOCAL = 0.9
HORIZON = 0.45
SHOULDER = 0.5
MARK_WIDTH = 0.15
NEAR_CLIP = 0.5

ROAD, MARKING, BACKGROUND = 0, 1, 2

UNITS = {"angle": "rad", "speed": "m/s", "torque": "N·m"}
SPLITS = ("train", "val")


def cosine_profile(knots: np.ndarray, count: int) -> np.ndarray:
    """Interpola `knots` igualmente espaçados sobre `count` quadros com meia onda de cosseno."""
    knots = np.asarray(knots, dtype=np.float64)
    if count == 1:
        return knots[:1].copy()
    positions = np.linspace(0.0, count - 1, len(knots))
    t = np.arange(count, dtype=np.float64)
    seg = np.clip(np.searchsorted(positions, t, side="right") - 1, 0, len(knots) - 2)
    w = (t - positions[seg]) / (positions[seg + 1] - positions[seg])
    s = 0.5 * (1.0 - np.cos(np.pi * w))
    return knots[seg] + (knots[seg + 1] - knots[seg]) * s


def arc_step(curvature: np.ndarray, distance: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Deslocamento (dx, dz) no referencial do carro e giro dθ após percorrer um arco."""
    curvature = np.asarray(curvature, dtype=np.float64)
    distance = np.asarray(distance, dtype=np.float64)
    turn = curvature * distance
    small = np.abs(turn) < 1e-4
    with np.errstate(divide="ignore", invalid="ignore"):
        dx = np.where(small, distance * turn / 2.0, (1.0 - np.cos(turn)) / curvature)
        dz = np.where(small, distance * (1.0 - turn * turn / 6.0), np.sin(turn) / curvature)
    return dx, dz, turn


def simulate_track(params: ScenarioParams, frames: int, rng: np.random.Generator) -> SceneTrack:
    """Integra a pose do veículo quadro a quadro seguindo o perfil de curvatura."""
    if params.curvature_profile is not None:
        knots = np.asarray(params.curvature_profile, dtype=np.float64)
    else:
        knots = rng.uniform(-params.max_curvature, params.max_curvature, params.num_knots)
    curvature = cosine_profile(knots, frames)
    jitter = cosine_profile(rng.uniform(-1.0, 1.0, params.num_knots), frames)
    speed = np.maximum(params.base_speed + params.speed_jitter * jitter, params.min_speed)

    step = speed * params.frame_dt
    dx, dz, turn = arc_step(curvature, step)
    x = np.zeros(frames)
    z = np.zeros(frames)
    heading = np.zeros(frames)
    for t in range(1, frames):
        theta = heading[t - 1]
        x[t] = x[t - 1] + dx[t - 1] * np.cos(theta) + dz[t - 1] * np.sin(theta)
        z[t] = z[t - 1] - dx[t - 1] * np.sin(theta) + dz[t - 1] * np.cos(theta)
        heading[t] = theta + turn[t - 1]
    distance = np.concatenate([[0.0], np.cumsum(step[:-1])])
    return SceneTrack(x=x, z=z, heading=heading, curvature=curvature, speed=speed, distance=distance)


def vehicle_states(track: SceneTrack, params: ScenarioParams) -> np.ndarray:
    """(N, 3) com ângulo de esterçamento, velocidade e torque por quadro."""
    angle = np.arctan(params.wheelbase * track.curvature)
    torque = np.zeros_like(angle)
    torque[1:] = params.torque_gain * np.diff(angle) / params.frame_dt
    return np.stack([angle, track.speed, torque], axis=-1)


@dataclass
class GroundGrid:
    u: np.ndarray
    v: np.ndarray
    ground: np.ndarray
    x: np.ndarray
    z: np.ndarray


def ground_grid(dims: tuple[int, int]) -> GroundGrid:
    """Centros de pixel normalizados e o ponto do chão (x, z) visto por cada um."""
    height, width = dims
    v, u = np.meshgrid((np.arange(height) + 0.5) / height, (np.arange(width) + 0.5) / width, indexing="ij")
    ground = v > HORIZON
    depth = np.where(ground, v - HORIZON, 1.0)
    x = np.where(ground, (u - 0.5) * CAM_HEIGHT / depth, 0.0)
    z = np.where(ground, FOCAL * CAM_HEIGHT / depth, 0.0)
    return GroundGrid(u=u, v=v, ground=ground, x=x, z=z)


def _classes(grid: GroundGrid, curvature: float, lane_width: float) -> np.ndarray:
    offset = grid.x - 0.5 * curvature * grid.z * grid.z
    half = lane_width / 2.0
    marking = grid.ground & (np.abs(np.abs(offset) - half) <= MARK_WIDTH / 2.0)
    road = grid.ground & (np.abs(offset) <= half + SHOULDER) & ~marking
    classes = np.full(grid.u.shape, BACKGROUND, dtype=np.int64)
    classes[road] = ROAD
    classes[marking] = MARKING
    return classes


def segmentation_maps(track: SceneTrack, params: ScenarioParams, dims: tuple[int, int]) -> np.ndarray:
    """One-hot (N, h, w, 3) de estrada, faixa e fundo."""
    grid = ground_grid(dims)
    out = np.zeros((len(track), *dims, 3), dtype=np.float32)
    eye = np.eye(3, dtype=np.float32)
    for t in range(len(track)):
        out[t] = eye[_classes(grid, float(track.curvature[t]), params.lane_width)]
    return out


def flow_fields(track: SceneTrack, params: ScenarioParams, dims: tuple[int, int]) -> np.ndarray:
    """Fluxo (du, dv) do quadro t para t+1 em coordenadas normalizadas, forma (N, h, w, 2).

    Pontos do chão que saem pela frente da câmera (z' <= NEAR_CLIP) recebem fluxo 0.
    """
    grid = ground_grid(dims)
    dx, dz, turn = arc_step(track.curvature, track.speed * params.frame_dt)
    out = np.zeros((len(track), *dims, 2), dtype=np.float64)
    sky_angle = np.arctan((grid.u - 0.5) / FOCAL)
    for t in range(len(track)):
        cos_t, sin_t = np.cos(turn[t]), np.sin(turn[t])
        px = grid.x - dx[t]
        pz = np.where(grid.ground, grid.z, 1.0) - dz[t]
        x_new = px * cos_t - pz * sin_t
        z_new = px * sin_t + pz * cos_t
        valid = grid.ground & (z_new > NEAR_CLIP)
        safe_z = np.where(valid, z_new, 1.0)
        du = np.where(valid, 0.5 + FOCAL * x_new / safe_z - grid.u, 0.0)
        dv = np.where(valid, HORIZON + FOCAL * CAM_HEIGHT / safe_z - grid.v, 0.0)
        sky_du = 0.5 + FOCAL * np.tan(sky_angle - turn[t]) - grid.u
        out[t, ..., 0] = np.where(grid.ground, du, sky_du)
        out[t, ..., 1] = dv
    return out.astype(np.float32)


def render_frames(
    track: SceneTrack, params: ScenarioParams, dims: tuple[int, int], rng: np.random.Generator
) -> np.ndarray:
    """Quadros RGB (N, H, W, 3) em [-1, 1]."""
    grid = ground_grid(dims)
    light = params.lighting
    sky = light * np.array([0.55, 0.7, 0.95])
    grass = light * np.array([0.25, 0.5, 0.2])
    frames = np.empty((len(track), *dims, 3), dtype=np.float64)
    for t in range(len(track)):
        theta = track.heading[t]
        world_x = track.x[t] + grid.x * np.cos(theta) + grid.z * np.sin(theta)
        world_z = track.z[t] - grid.x * np.sin(theta) + grid.z * np.cos(theta)
        grass_tex = 0.8 + 0.2 * np.cos(np.abs(0.9 * world_x)) * np.cos(np.abs(0.7 * world_z))
        road_tex = 0.85 + 0.15 * np.cos(np.abs(1.3 * world_z))

        classes = _classes(grid, float(track.curvature[t]), params.lane_width)
        image = np.where(grid.ground[..., None], grass * grass_tex[..., None], sky)
        image = np.where((classes == ROAD)[..., None], (light * 0.4 * road_tex)[..., None], image)
        image = np.where((classes == MARKING)[..., None], light * 0.95, image)
        frames[t] = image
    frames += params.noise_amplitude * rng.standard_normal(frames.shape)
    return np.clip(2.0 * frames - 1.0, -1.0, 1.0).astype(np.float32)


def sequence_seed(seed: int, split: str, index: int) -> int:
    entropy = np.random.SeedSequence([seed, SPLITS.index(split), index])
    return int(entropy.generate_state(1)[0])


def generate_sequence(
    seed: int, params: ScenarioParams, clip_len: int, clips: int, sequence_id: str | None = None
) -> list[Clip]:
    """Gera uma sequência contínua e a corta em `clips` clipes de `clip_len` quadros."""
    if clip_len < 1 or clips < 1:
        raise ConfigError(f"clip_len e clips devem ser >= 1 (recebeu {clip_len}, {clips})")
    sequence_id = sequence_id or f"seq{seed}"
    rng = np.random.default_rng(seed)
    total = clip_len * clips
    track = simulate_track(params, total, rng)
    frames = render_frames(track, params, params.render_dims, rng)
    states = vehicle_states(track, params).astype(np.float32)
    out = []
    for i in range(clips):
        lo, hi = i * clip_len, (i + 1) * clip_len
        out.append(
            Clip(
                clip_id=f"{sequence_id}-c{i:03d}",
                frames=frames[lo:hi],
                states=states[lo:hi],
                seed=seed,
                sequence_id=sequence_id,
                index=i,
                scene=track.slice(lo, hi),
                params=params,
            )
        )
    return out


def generate_clip(seed: int, params: ScenarioParams, clip_len: int = 10) -> Clip:
    return generate_sequence(seed, params, clip_len, 1)[0]


@dataclass
class RawRecording:
    """Gravação importada: quadros uint8 (T, H, W, 3) e sinais do CAN por quadro."""

    recording_id: str
    frames: np.ndarray
    angle: np.ndarray
    speed: np.ndarray
    torque: np.ndarray


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Intervalos [início, fim) de valores True consecutivos."""
    edges = np.diff(np.concatenate([[0], mask.astype(np.int8), [0]]))
    starts = np.flatnonzero(edges == 1)
    stops = np.flatnonzero(edges == -1)
    return list(zip(starts.tolist(), stops.tolist()))


def preprocess(
    recording: RawRecording,
    clip_len: int,
    dims: tuple[int, int],
    speed_threshold: float = 15.0,
    downsample: int = 2,
    pixel_max: float = 255.0,
) -> list[Clip]:
    """Subamostra, filtra por velocidade, normaliza para [-1, 1], redimensiona e empacota clipes.

    Trechos contínuos com menos de `clip_len` quadros sobreviventes são descartados
    com aviso.
    """
    frames = np.asarray(recording.frames)[::downsample]
    states = np.stack([recording.angle, recording.speed, recording.torque], axis=-1)[::downsample]
    if frames.shape[0] != states.shape[0]:
        raise DataError(
            f"{recording.recording_id}: {frames.shape[0]} quadros para {states.shape[0]} estados"
        )
    keep = states[:, 1] >= speed_threshold
    clips: list[Clip] = []
    for start, stop in _runs(keep):
        length = stop - start
        if length < clip_len:
            logger.warning("%s: trecho [%d, %d) com %d quadros (< %d) descartado",
                           recording.recording_id, start, stop, length, clip_len)
            continue
        scaled = Tensor.wrap(frames[start:stop].astype(np.float32) / np.float32(pixel_max) * 2.0 - 1.0)
        resized = ops.resample(scaled, dims, mode="bilinear").data.astype(np.float32)
        for offset in range(0, length - clip_len + 1, clip_len):
            index = len(clips)
            clips.append(
                Clip(
                    clip_id=f"{recording.recording_id}-c{index:03d}",
                    frames=resized[offset:offset + clip_len],
                    states=states[start + offset:start + offset + clip_len].astype(np.float32),
                    seed=0,
                    sequence_id=f"{recording.recording_id}-r{start}",
                    index=index,
                )
            )
    if not clips:
        logger.warning("%s: nenhum clipe sobreviveu ao pré-processamento", recording.recording_id)
    return clips


FeaturesFn = Callable[[Clip], dict[str, np.ndarray]]


def write_clip(directory: Path, clip: Clip, features: dict[str, np.ndarray] | None = None,
               file_stems: dict[str, str] | None = None) -> Path:
    """Grava quadros, estados, cena e alvos auxiliares de um clipe em `directory`."""
    directory.mkdir(parents=True, exist_ok=True)
    write_tensor(directory / "frames", np.asarray(clip.frames, dtype=np.float32))
    write_tensor(directory / "states", np.asarray(clip.states, dtype=np.float32))
    if clip.scene is not None:
        write_tensor(directory / "scene", clip.scene.as_array().astype(np.float64))
    aux = {}
    for name, array in (features or {}).items():
        stem = (file_stems or {}).get(name, name)
        write_tensor(directory / stem, np.asarray(array, dtype=np.float32))
        aux[stem] = list(array.shape)
    manifest = {
        "clip_id": clip.clip_id,
        "sequence_id": clip.sequence_id,
        "index": clip.index,
        "seed": clip.seed,
        "frames": list(clip.frames.shape),
        "aux": aux,
        "units": UNITS,
        "params": clip.params.model_dump(mode="json") if clip.params is not None else None,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return directory


def load_clip(directory: str | Path) -> Clip:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"clipe sem manifesto: {directory}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    frames = read_tensor(directory / "frames")
    states = read_tensor(directory / "states")
    if frames.ndim != 4 or states.shape != (frames.shape[0], 3):
        raise DataError(f"{directory}: quadros {frames.shape} e estados {states.shape} incompatíveis")
    scene = SceneTrack.from_array(read_tensor(directory / "scene")) if (directory / "scene").exists() else None
    params = ScenarioParams.model_validate(manifest["params"]) if manifest.get("params") else None
    return Clip(
        clip_id=manifest["clip_id"],
        frames=frames,
        states=states,
        seed=int(manifest["seed"]),
        sequence_id=manifest["sequence_id"],
        index=int(manifest["index"]),
        scene=scene,
        params=params,
        directory=directory,
    )


@dataclass
class ClipDataset:
    """Clipes agrupados por sequência, em memória ou num diretório `<split>/<clip_id>/`."""

    sequences: dict[str, list[str]]
    root: Path | None = None
    clips: dict[str, Clip] = field(default_factory=dict)

    @classmethod
    def from_clips(cls, clips: list[Clip]) -> "ClipDataset":
        sequences: dict[str, list[Clip]] = {}
        for clip in clips:
            sequences.setdefault(clip.sequence_id, []).append(clip)
        ordered = {
            seq: [c.clip_id for c in sorted(items, key=lambda c: c.index)]
            for seq, items in sorted(sequences.items())
        }
        return cls(sequences=ordered, clips={c.clip_id: c for c in clips})

    @classmethod
    def open(cls, root: str | Path) -> "ClipDataset":
        root = Path(root)
        index_path = root / "manifest.json"
        if not index_path.exists():
            raise DataError(f"conjunto sem índice: {index_path}")
        index = json.loads(index_path.read_text(encoding="utf-8"))
        return cls(sequences={k: list(v) for k, v in sorted(index["sequences"].items())}, root=root)

    @property
    def clip_ids(self) -> list[str]:
        return [cid for ids in self.sequences.values() for cid in ids]

    def __len__(self) -> int:
        return sum(len(ids) for ids in self.sequences.values())

    def load(self, clip_id: str) -> Clip:
        if clip_id in self.clips:
            return self.clips[clip_id]
        if self.root is None:
            raise DataError(f"clipe desconhecido: {clip_id}")
        return load_clip(self.root / clip_id)

    def states(self) -> np.ndarray:
        return np.concatenate([self.load(cid).states for cid in self.clip_ids], axis=0)


def write_split(root: str | Path, clips: list[Clip], features_fn: FeaturesFn | None = None,
                file_stems: dict[str, str] | None = None) -> ClipDataset:
    """Grava um split inteiro e o índice de sequências; devolve o conjunto aberto do disco."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for clip in clips:
        features = features_fn(clip) if features_fn is not None else None
        write_clip(root / clip.clip_id, clip, features, file_stems)
    index = ClipDataset.from_clips(clips)
    (root / "manifest.json").write_text(
        json.dumps({"sequences": index.sequences, "clips": len(clips)}, indent=2, sort_keys=True),
        encoding="utf-8",
    )
    logger.info("Split gravado em %s: %d clipes em %d sequências", root, len(clips), len(index.sequences))
    return ClipDataset.open(root)


def generate_split(split: str, seed: int, params: ScenarioParams, data: DataConfig, clip_len: int) -> list[Clip]:
    """Gera as sequências de um split com velocidade nunca abaixo de `data.speed_threshold`."""
    if params.min_speed < data.speed_threshold:
        logger.debug("min_speed %.2f elevado ao limiar do filtro %.2f", params.min_speed, data.speed_threshold)
        params = params.model_copy(update={"min_speed": data.speed_threshold})
    count = data.train_sequences if split == "train" else data.val_sequences
    clips: list[Clip] = []
    for i in range(count):
        clips.extend(
            generate_sequence(
                sequence_seed(seed, split, i), params, clip_len, data.clips_per_sequence,
                sequence_id=f"{split}-{i:04d}",
            )
        )
    return clips


def generate_dataset(
    root: str | Path,
    seed: int,
    params: ScenarioParams,
    data: DataConfig,
    clip_len: int,
    features_fn: FeaturesFn | None = None,
    file_stems: dict[str, str] | None = None,
) -> dict[str, ClipDataset]:
    """Gera os splits de treino e validação (sequências disjuntas) sob `root`."""
    root = Path(root)
    datasets = {}
    for split in SPLITS:
        clips = generate_split(split, seed, params, data, clip_len)
        datasets[split] = write_split(root / split, clips, features_fn, file_stems)
    return datasets
