from dataclasses import asdict, dataclass, fields

from ..errors import ConfigError


@dataclass
class ConformerConfig:
    """Acoustic model hyperparameters; defaults are the grid-searched values."""

    input_dim: int = 80
    d_model: int = 512
    attention_heads: int = 4
    conv_kernel: int = 15
    encoder_layers: int = 8
    decoder_layers: int = 4
    ff_units: int = 2048
    dropout: float = 0.1
    vocab_size: int = 1000
    ctc_weight: float = 0.3
    label_smoothing: float = 0.1
    subsample_channels: int = 0  # 0 -> d_model
    dtype: str = "float64"

    def __post_init__(self):
        if self.d_model % self.attention_heads:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by {self.attention_heads} heads"
            )
        if self.conv_kernel % 2 == 0:
            raise ConfigError(f"conv_kernel must be odd, got {self.conv_kernel}")
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise ConfigError(f"ctc_weight must lie in [0, 1], got {self.ctc_weight}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def d_k(self):
        return self.d_model // self.attention_heads

    @property
    def channels(self):
        return self.subsample_channels or self.d_model

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})
