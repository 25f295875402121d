"""Rede principal: ResNet 3D inflada + LSTM com três taps de features.

A rede processa lotes (B, N, H, W, 3) e prevê ângulo, velocidade e torque para
cada quadro. As convoluções 3D são inicializadas a partir de kernels 2D via
`inflate`, o que torna a resposta a um clipe constante no tempo igual à da rede
2D correspondente nos quadros interiores.
"""

from __future__ import annotations

import json
import logging
from collections.abc import Callable
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fmnet.core import ops
from fmnet.core.container import read_tensor, write_tensor
from fmnet.core.errors import ConfigError, DataError, UsageError
from fmnet.core.tensor import Tensor, default_dtype
from fmnet.schemas.config import LEVELS, MainNetConfig
from fmnet.schemas.records import LstmState, NetOutput

logger = logging.getLogger(__name__)

STATE_DIM = 3


@dataclass(frozen=True)
class ConvSpec:
    name: str
    k: int
    wt: int
    cin: int
    cout: int
    stride: int


def inflate(weights2d: np.ndarray, w_t: int) -> np.ndarray:
    """Replica um kernel (k, k, Cin, Cout) w_t vezes no tempo e divide por w_t."""
    if w_t < 1 or w_t % 2 == 0:
        raise ConfigError(f"w_t deve ser ímpar e >= 1, recebeu {w_t}")
    weights2d = np.asarray(weights2d)
    if w_t == 1:
        return weights2d[None].copy()
    return np.repeat((weights2d / w_t)[None], w_t, axis=0)


def collapse(weights3d: np.ndarray) -> np.ndarray:
    """Soma temporal de um kernel 3D: o kernel 2D equivalente para entradas constantes."""
    return np.asarray(weights3d).sum(axis=0)


def lstm_step(
    x: Tensor, h: Tensor, c: Tensor, wx: Tensor, wh: Tensor, bias: Tensor
) -> tuple[Tensor, Tensor]:
    """Um passo da célula LSTM com portas na ordem (entrada, esquecimento, saída, candidata)."""
    hidden = h.shape[-1]
    if wx.shape != (x.shape[-1], 4 * hidden) or wh.shape != (hidden, 4 * hidden) or bias.shape != (4 * hidden,):
        raise ConfigError(
            f"LSTM incompatível: x {x.shape}, h {h.shape}, wx {wx.shape}, wh {wh.shape}, bias {bias.shape}"
        )
    gates = x @ wx + h @ wh + bias
    i = ops.sigmoid(gates[..., 0:hidden])
    f = ops.sigmoid(gates[..., hidden:2 * hidden])
    o = ops.sigmoid(gates[..., 2 * hidden:3 * hidden])
    g = ops.tanh(gates[..., 3 * hidden:])
    c_new = f * c + i * g
    h_new = o * ops.tanh(c_new)
    return h_new, c_new


def conv_layout(config: MainNetConfig) -> list[ConvSpec]:
    """Lista ordenada de convoluções do tronco; a ordem fixa a inicialização."""
    wt = config.temporal_kernel
    widths = config.block_widths
    specs = [ConvSpec("stem.conv", 3, wt, config.input_dims[2], widths[0], 2)]
    cin = widths[0]
    for s, width in enumerate(widths, start=1):
        for b in range(1, config.depth + 1):
            prefix = f"stage{s}.block{b}"
            stride = 2 if (s > 1 and b == 1) else 1
            specs.append(ConvSpec(f"{prefix}.conv1", 3, wt, cin, width, stride))
            specs.append(ConvSpec(f"{prefix}.conv2", 3, wt, width, width, 1))
            if stride != 1 or cin != width:
                specs.append(ConvSpec(f"{prefix}.proj", 1, 1, cin, width, stride))
            cin = width
    return specs


def layer_names(config: MainNetConfig) -> list[str]:
    names = ["stem"]
    for s in range(1, len(config.block_widths) + 1):
        names.extend(f"stage{s}.block{b}" for b in range(1, config.depth + 1))
        names.append(f"stage{s}")
    return names


def validate_taps(config: MainNetConfig) -> None:
    taps = config.tap_points
    if len(taps) != 3 or sorted(taps.values()) != sorted(LEVELS):
        raise ConfigError(
            f"tap_points deve ligar exatamente um layer a cada nível {LEVELS}, recebeu {taps}"
        )
    valid = set(layer_names(config))
    unknown = [name for name in taps if name not in valid]
    if unknown:
        raise ConfigError(f"tap_points referencia layers inexistentes: {unknown}")


def temporal_radius(config: MainNetConfig) -> int:
    """Quantos quadros de cada borda são afetados pelo padding temporal."""
    pt = (config.temporal_kernel - 1) // 2
    return pt * (1 + 2 * len(config.block_widths) * config.depth)


def tap_shapes(config: MainNetConfig) -> dict[str, tuple[int, int, int]]:
    """Forma (h, w, c) de cada tap, por nível."""
    height, width, _ = config.input_dims
    shapes: dict[str, tuple[int, int, int]] = {}
    h, w = (height + 1) // 2, (width + 1) // 2
    shapes["stem"] = (h, w, config.block_widths[0])
    for s, channels in enumerate(config.block_widths, start=1):
        if s > 1:
            h, w = (h + 1) // 2, (w + 1) // 2
        for b in range(1, config.depth + 1):
            shapes[f"stage{s}.block{b}"] = (h, w, channels)
        shapes[f"stage{s}"] = (h, w, channels)
    return {level: shapes[name] for name, level in config.tap_points.items()}


ConvFn = Callable[[Tensor, Tensor, int], Tensor]


def _conv3d(x: Tensor, kernel: Tensor, stride: int) -> Tensor:
    return ops.conv3d(x, kernel, spatial_stride=stride)


def _conv2d(x: Tensor, kernel: Tensor, stride: int) -> Tensor:
    return ops.conv2d(x, kernel, stride=stride, pad=(kernel.shape[0] - 1) // 2)


class MainNet:
    def __init__(
        self,
        config: MainNetConfig,
        params: dict[str, Tensor],
        source_2d: dict[str, np.ndarray] | None = None,
    ) -> None:
        self.config = config
        self.params = params
        # kernels 2D de onde as convs 3D foram infladas; None quando carregada de checkpoint
        self.source_2d = source_2d
        self.specs = conv_layout(config)
        self.tap_layers = dict(config.tap_points)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def kernels_2d(self) -> dict[str, Tensor]:
        """Kernels da rede 2D de referência.

        Usa os kernels 2D de origem quando a rede foi inflada aqui; para pesos
        carregados de checkpoint, a soma temporal de cada kernel 3D.
        """
        if self.source_2d is not None:
            return {name: Tensor.wrap(kernel) for name, kernel in self.source_2d.items()}
        return {spec.name: Tensor.wrap(collapse(self.params[f"{spec.name}.weight"].data)) for spec in self.specs}

    def trunk(
        self, x: Tensor, conv: ConvFn = _conv3d, kernels: dict[str, Tensor] | None = None
    ) -> dict[str, Tensor]:
        """Executa o tronco residual e devolve a ativação de cada layer nomeado."""
        def apply(spec_name: str, inp: Tensor, stride: int) -> Tensor:
            weight = kernels[spec_name] if kernels is not None else self.params[f"{spec_name}.weight"]
            return conv(inp, weight, stride) + self.params[f"{spec_name}.bias"]

        specs = {spec.name: spec for spec in self.specs}
        acts: dict[str, Tensor] = {}
        out = ops.relu(apply("stem.conv", x, 2))
        acts["stem"] = out
        for s in range(1, len(self.config.block_widths) + 1):
            for b in range(1, self.config.depth + 1):
                prefix = f"stage{s}.block{b}"
                first = specs[f"{prefix}.conv1"]
                y = ops.relu(apply(first.name, out, first.stride))
                y = apply(f"{prefix}.conv2", y, 1)
                shortcut = apply(f"{prefix}.proj", out, first.stride) if f"{prefix}.proj" in specs else out
                out = ops.relu(y + shortcut)
                acts[prefix] = out
            acts[f"stage{s}"] = out
        return acts

    def forward(
        self,
        clip: Tensor | np.ndarray,
        prev_state: np.ndarray | None = None,
        lstm_state: LstmState | None = None,
    ) -> NetOutput:
        """Prevê (ângulo, velocidade, torque) normalizados para cada quadro do clipe.

        Args:
            clip: (B, N, H, W, 3) ou (N, H, W, 3), valores em [-1, 1].
            prev_state: (B, 3) com a última predição da sequência; zeros no início.
            lstm_state: estado (h, c) herdado do clipe anterior da mesma sequência.

        Returns:
            NetOutput com predições (B, N, 3), taps por nível e o novo estado do LSTM.
        """
        if not isinstance(clip, Tensor):
            clip = Tensor(clip)
        if clip.ndim == 4:
            clip = clip.reshape(1, *clip.shape)
        expected = (self.config.clip_len, *self.config.input_dims)
        if clip.ndim != 5 or clip.shape[1:] != expected:
            raise UsageError(f"clipe com forma {clip.shape}, esperado (B, {', '.join(map(str, expected))})")
        batch, frames = clip.shape[0], clip.shape[1]
        dtype = self.params["head.weight"].dtype

        acts = self.trunk(clip)
        taps = {level: acts[name] for name, level in self.tap_layers.items()}
        last_stage = acts[f"stage{len(self.config.block_widths)}"]
        pooled = last_stage.mean(axis=(-3, -2))
        feat = ops.relu(ops.dense(pooled, self.params["fc.weight"], self.params["fc.bias"]))

        if prev_state is None:
            prev_state = np.zeros((batch, STATE_DIM))
        if not np.all(np.isfinite(prev_state)):
            raise UsageError("prev_state contém valores não finitos")
        if lstm_state is None:
            lstm_state = LstmState.zeros(batch, self.config.lstm_hidden, dtype=dtype)

        if not self.config.use_lstm:
            pred = ops.dense(feat, self.params["head.weight"], self.params["head.bias"])
            return NetOutput(prediction=pred, taps=taps, lstm_state=lstm_state)

        prev = Tensor.wrap(np.asarray(prev_state, dtype=dtype))
        h = Tensor.wrap(np.asarray(lstm_state.h, dtype=dtype))
        c = Tensor.wrap(np.asarray(lstm_state.c, dtype=dtype))
        outputs = []
        for t in range(frames):
            step_in = ops.concat([feat[:, t, :], prev], axis=-1)
            h, c = lstm_step(
                step_in, h, c, self.params["lstm.wx"], self.params["lstm.wh"], self.params["lstm.bias"]
            )
            y = ops.dense(h, self.params["head.weight"], self.params["head.bias"])
            outputs.append(y)
            prev = y.detach()
        pred = ops.stack(outputs, axis=1)
        return NetOutput(prediction=pred, taps=taps, lstm_state=LstmState(h.data, c.data))


def build(config: MainNetConfig, seed: int) -> MainNet:
    """Cria a rede com parâmetros determinísticos dado `seed`.

    Kernels 3D nascem de kernels 2D (uniforme de He) inflados no tempo; camadas
    densas, LSTM e cabeça usam uniforme escalada pelo fan-in.
    """
    validate_taps(config)
    rng = np.random.default_rng(seed)
    dtype = default_dtype()
    params: dict[str, Tensor] = {}
    source_2d: dict[str, np.ndarray] = {}

    for spec in conv_layout(config):
        fan_in = spec.k * spec.k * spec.cin
        bound = np.sqrt(6.0 / fan_in)
        if spec.name.endswith("conv2"):
            bound *= 0.5
        w2d = rng.uniform(-bound, bound, size=(spec.k, spec.k, spec.cin, spec.cout))
        source_2d[spec.name] = w2d.astype(dtype)
        params[f"{spec.name}.weight"] = Tensor.parameter(inflate(w2d, spec.wt).astype(dtype), f"{spec.name}.weight")
        params[f"{spec.name}.bias"] = Tensor.parameter(np.zeros(spec.cout, dtype=dtype), f"{spec.name}.bias")

    def uniform(name: str, shape: tuple[int, ...], fan_in: int) -> None:
        bound = 1.0 / np.sqrt(fan_in)
        params[name] = Tensor.parameter(rng.uniform(-bound, bound, size=shape).astype(dtype), name)

    last = config.block_widths[-1]
    uniform("fc.weight", (last, config.fc_dim), last)
    params["fc.bias"] = Tensor.parameter(np.zeros(config.fc_dim, dtype=dtype), "fc.bias")
    hidden = config.lstm_hidden
    if config.use_lstm:
        lstm_in = config.fc_dim + STATE_DIM
        uniform("lstm.wx", (lstm_in, 4 * hidden), lstm_in)
        uniform("lstm.wh", (hidden, 4 * hidden), hidden)
        bias = np.zeros(4 * hidden, dtype=dtype)
        bias[hidden:2 * hidden] = 1.0
        params["lstm.bias"] = Tensor.parameter(bias, "lstm.bias")
        uniform("head.weight", (hidden, STATE_DIM), hidden)
    else:
        uniform("head.weight", (config.fc_dim, STATE_DIM), config.fc_dim)
    params["head.bias"] = Tensor.parameter(np.zeros(STATE_DIM, dtype=dtype), "head.bias")

    logger.info("Rede principal criada: %d parâmetros em %d tensores (seed=%d)",
                sum(p.numel for p in params.values()), len(params), seed)
    return MainNet(config, params, source_2d)


def load_2d_weights(net: MainNet, weights2d: dict[str, np.ndarray]) -> None:
    """Inicializa as convoluções 3D inflando kernels 2D fornecidos (nome do layer -> kernel)."""
    source_2d: dict[str, np.ndarray] = {}
    for spec in net.specs:
        if spec.name not in weights2d:
            raise ConfigError(f"kernel 2D ausente para {spec.name}")
        kernel = inflate(weights2d[spec.name], spec.wt)
        param = net.params[f"{spec.name}.weight"]
        if kernel.shape != param.shape:
            raise ConfigError(f"kernel 2D de {spec.name} com forma {kernel.shape[1:]} incompatível")
        param.data = kernel.astype(param.dtype)
        source_2d[spec.name] = np.asarray(weights2d[spec.name], dtype=param.dtype)
    net.source_2d = source_2d


def inflation_error(net: MainNet, frame: np.ndarray, frames: int | None = None) -> float:
    """Máximo erro absoluto entre as ativações 3D (quadros interiores) e a rede 2D.

    Args:
        net: rede com kernels 3D.
        frame: quadro (H, W, C) repetido ao longo do tempo.
        frames: comprimento do clipe constante; por padrão 2*raio + 3.
    """
    radius = temporal_radius(net.config)
    frames = frames or 2 * radius + 3
    if frames <= 2 * radius:
        raise ConfigError(f"clipe de {frames} quadros não tem quadros interiores (raio {radius})")
    dtype = net.params["head.weight"].dtype
    still = Tensor.wrap(np.repeat(np.asarray(frame, dtype=dtype)[None], frames, axis=0))
    acts3d = net.trunk(still)
    acts2d = net.trunk(Tensor.wrap(np.asarray(frame, dtype=dtype)), conv=_conv2d, kernels=net.kernels_2d())
    worst = 0.0
    for name, act in acts3d.items():
        interior = act.data[radius:frames - radius]
        worst = max(worst, float(np.max(np.abs(interior - acts2d[name].data[None]))))
    return worst


def save_checkpoint(directory: str | Path, params: dict[str, Tensor], manifest: dict) -> Path:
    """Grava parâmetros (um contêiner por tensor) e um manifesto JSON determinístico."""
    directory = Path(directory)
    (directory / "params").mkdir(parents=True, exist_ok=True)
    entries = []
    for name, param in params.items():
        write_tensor(directory / "params" / name, param.data)
        entries.append({"name": name, "shape": list(param.shape), "dtype": str(param.dtype)})
    body = {**manifest, "parameters": entries}
    (directory / "manifest.json").write_text(json.dumps(body, indent=2, sort_keys=True), encoding="utf-8")
    logger.info("Checkpoint salvo em %s (%d tensores)", directory, len(entries))
    return directory


def load_checkpoint(directory: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"manifesto de checkpoint ausente: {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["parameters"]:
        array = read_tensor(directory / "params" / entry["name"])
        if list(array.shape) != entry["shape"]:
            raise DataError(f"forma de {entry['name']} diverge do manifesto")
        arrays[entry["name"]] = array
    return arrays, manifest


def restore(arrays: dict[str, np.ndarray], manifest: dict) -> MainNet:
    """Reconstrói a rede principal a partir de um checkpoint carregado."""
    config = MainNetConfig.model_validate(manifest["network"])
    net = build(config, seed=int(manifest.get("seed", 0)))
    for name, param in net.params.items():
        if name not in arrays:
            raise DataError(f"parâmetro {name} ausente no checkpoint")
        param.data = arrays[name].astype(param.dtype)
    net.source_2d = None
    return net
