"""Flat key-value run configuration.

Plain-text files with one `key = value` per line (# comments allowed),
dotted keys grouped as model.*, train.*, scene.*, loss.* and eval.*.
Unknown keys are rejected; every command writes its fully resolved config
next to its outputs so any run can be reproduced from that file alone.
"""

from pathlib import Path

from .encoder import EncoderConfig
from .generator import GeneratorConfig
from .losses import LossWeights
from .regions import BlurSchedule
from .scenes import SceneConfig
from .util import atomic_write_bytes


class ConfigError(ValueError):
    pass


DEFAULTS = {
    # generator / encoder / proxy architecture
    "model.image_size": 64,
    "model.img_channels": 3,
    "model.latent_dim": 64,
    "model.z_dim": 64,
    "model.mapping_layers": 3,
    "model.fmap_base": 8,
    "model.fmap_max": 32,
    "model.enc_base": 16,
    "model.enc_head_channels": 24,
    "model.proxy_base": 12,
    "model.seed": 7,
    # training
    "train.n_iters": 3,
    "train.r_max": 8.0,
    "train.lr": 1e-4,
    "train.batch_size": 8,
    "train.max_steps": 5000,
    "train.dilation_radius": 3,
    "train.use_ind": True,
    "train.use_unf": True,
    "train.mask_losses": True,
    "train.detach_between_iters": False,
    "train.ind_source": "image",
    "train.model_seed": 1,
    "train.data_seed": 2,
    "train.shuffle_seed": 3,
    "train.w0_samples": 10000,
    "train.checkpoint_every": 1000,
    # loss weights
    "loss.l2": 1.0,
    "loss.lpips": 0.8,
    "loss.id": 0.1,
    "loss.ind": 1.0,
    # synthetic scenes
    "scene.count": 100,
    "scene.seed": 0,
    "scene.occluder_prob": 0.3,
    "scene.occluder_min_frac": 0.08,
    "scene.occluder_max_frac": 0.25,
    "scene.bar_weight": 0.5,
    "scene.blob_weight": 0.5,
    "scene.ellipse_min_frac": 0.26,
    "scene.ellipse_max_frac": 0.42,
    "scene.center_jitter_frac": 0.08,
    "scene.noise_cell_min": 4,
    "scene.noise_cell_max": 16,
    "scene.stripe_prob": 0.35,
    "scene.checker_prob": 0.25,
    "scene.dilation_radius": 3,
    "scene.eval_every": 10,
    # evaluation
    "eval.n_iters": 3,
    "eval.split": "eval",
    "eval.max_samples": 0,
}


def _parse_value(key: str, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from exc
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from exc
    return raw


class RunConfig:
    """Resolved configuration: defaults overlaid with file and CLI overrides."""

    def __init__(self, values=None):
        self._values = dict(DEFAULTS)
        for key, val in (values or {}).items():
            self.set(key, val)

    def __getitem__(self, key: str):
        if key not in self._values:
            raise ConfigError(f"unknown config key {key!r}")
        return self._values[key]

    def set(self, key: str, value):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(value, str) and not isinstance(DEFAULTS[key], str):
            value = _parse_value(key, value)
        expected = type(DEFAULTS[key])
        if expected is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if not isinstance(value, expected) or isinstance(value, bool) != isinstance(DEFAULTS[key], bool):
            raise ConfigError(f"{key}: expected {expected.__name__}, got {value!r}")
        self._values[key] = value

    def update_from_text(self, text: str, source: str = "<config>"):
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
            key, _, raw = line.partition("=")
            self.set(key.strip(), raw.strip())

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        cfg = cls()
        cfg.update_from_text(Path(path).read_text(), source=str(path))
        return cfg

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        cfg = cls()
        cfg.update_from_text(text)
        return cfg

    def apply_overrides(self, pairs):
        """Apply repeatable CLI overrides given as 'key=value' strings."""
        for pair in pairs:
            if "=" not in pair:
                raise ConfigError(f"override must look like key=value, got {pair!r}")
            key, _, raw = pair.partition("=")
            self.set(key.strip(), raw.strip())

    def text(self) -> str:
        lines = [f"{key} = {self._values[key]}" for key in sorted(self._values)]
        return "\n".join(lines) + "\n"

    def write_resolved(self, directory, name: str = "resolved_config.txt") -> Path:
        path = Path(directory) / name
        atomic_write_bytes(path, self.text().encode("utf-8"))
        return path

    # bridges into the typed configs of the individual modules

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(
            image_size=self["model.image_size"],
            img_channels=self["model.img_channels"],
            latent_dim=self["model.latent_dim"],
            z_dim=self["model.z_dim"],
            mapping_layers=self["model.mapping_layers"],
            fmap_base=self["model.fmap_base"],
            fmap_max=self["model.fmap_max"],
        )

    def encoder_config(self) -> EncoderConfig:
        gcfg = self.generator_config()
        return EncoderConfig(
            image_size=gcfg.image_size,
            img_channels=gcfg.img_channels,
            num_slots=gcfg.num_slots,
            latent_dim=gcfg.latent_dim,
            base_channels=self["model.enc_base"],
            head_channels=self["model.enc_head_channels"],
        )

    def loss_weights(self, use_ind: bool = True) -> LossWeights:
        return LossWeights(
            l2=self["loss.l2"],
            lpips=self["loss.lpips"],
            id=self["loss.id"],
            ind=self["loss.ind"] if use_ind else 0.0,
        )

    def blur_schedule(self) -> BlurSchedule:
        return BlurSchedule(r_max=self["train.r_max"], n_iters=self["train.n_iters"])

    def scene_config(self) -> SceneConfig:
        return SceneConfig(
            occluder_prob=self["scene.occluder_prob"],
            occluder_min_frac=self["scene.occluder_min_frac"],
            occluder_max_frac=self["scene.occluder_max_frac"],
            bar_weight=self["scene.bar_weight"],
            blob_weight=self["scene.blob_weight"],
            ellipse_min_frac=self["scene.ellipse_min_frac"],
            ellipse_max_frac=self["scene.ellipse_max_frac"],
            center_jitter_frac=self["scene.center_jitter_frac"],
            noise_cell_min=self["scene.noise_cell_min"],
            noise_cell_max=self["scene.noise_cell_max"],
            stripe_prob=self["scene.stripe_prob"],
            checker_prob=self["scene.checker_prob"],
            dilation_radius=self["scene.dilation_radius"],
            eval_every=self["scene.eval_every"],
        )
