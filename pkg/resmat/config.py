"""
Model and training-run configuration.

Model shapes are frozen dataclasses: :py:class:`TransformerConfig` and
:py:class:`RMTConfig`. A training run is a :py:class:`TrainRunConfig`, which is
usually read from a JSON file and then adjusted with ``key=value`` overrides
from the command line::

  {
    "arch": "rmt",
    "preset": "desk",
    "model": {"d_k": 16},
    "train_corpus": "data/corpus.txt",
    "out_dir": "runs/rmt-dk16",
    "steps": 2000,
    "lr": 0.003
  }

  config = load_run_config('run.json', overrides=['model.d_k=64', 'seed=3'])

Every field is declared as a ``(name, factory)`` pair. The factory turns the
raw value (a JSON value, or a string from an override) into the typed value,
so ``int('5') = 5`` and ``f_bool('false') = False``. A value that doesn't
convert raises :py:class:`ValidationException` naming where it came from.

Limitations and details:

* ``preset`` picks the starting model shape; the ``model`` block and
  ``model.*`` overrides are applied on top of it, in that order.
* ``dk`` is accepted as shorthand for ``model.d_k``, and likewise ``dv``,
  ``dff`` and ``d``.
"""
import json
from dataclasses import asdict, dataclass, field, fields, replace

ARCHS = ('transformer', 'rmt')
INIT_MODES = ('default', 'xavier', 'lecun')
DTYPES = ('float32', 'float64')

FIELD_ALIASES = {
    'dk': 'model.d_k',
    'dv': 'model.d_v',
    'dff': 'model.d_ff',
    'd': 'model.d_model',
}


class ConfigError(ValueError):
    """A configuration is internally inconsistent"""
    pass


class ValidationException(Exception):
    """
    Thrown when a value does not match the field schema of the config it is
    being read into
    """
    pass


def f_bool(val):
    """Accept real booleans and the usual string spellings of them"""
    if isinstance(val, bool):
        return val
    if isinstance(val, str) and val.lower() in ('true', '1', 'yes', 'on'):
        return True
    if isinstance(val, str) and val.lower() in ('false', '0', 'no', 'off'):
        return False
    raise ValueError("Bad boolean value: {!r}".format(val))


def f_int(val):
    if isinstance(val, bool):
        raise ValueError("Bad integer value: {!r}".format(val))
    if isinstance(val, float) and not val.is_integer():
        raise ValueError("Bad integer value: {!r}".format(val))
    return int(val)


def f_choice(*choices):
    def convert(val):
        if val not in choices:
            raise ValueError(
                "Bad value {!r}, expected one of {}".format(val, choices))
        return val
    return convert


def f_optional(factory):
    def convert(val):
        if val is None or val == '' or val == 'null':
            return None
        return factory(val)
    return convert


@dataclass(frozen=True)
class TransformerConfig:
    """
    Shape of the baseline decoder-only transformer.

    .. py:attribute:: vocab_size

      ``V``

    .. py:attribute:: max_seq_len

      ``N``, the number of learned position embeddings

    .. py:attribute:: d_model

      ``D``, width of the residual stream

    .. py:attribute:: n_layers

      ``L``, number of attention + feed-forward pairs

    .. py:attribute:: n_heads

      ``H``

    .. py:attribute:: d_head

      ``D_h``. ``n_heads * d_head`` need not equal ``d_model``.

    .. py:attribute:: d_ff

      ``D_FF``
    """
    vocab_size: int
    max_seq_len: int
    d_model: int
    n_layers: int
    n_heads: int
    d_head: int
    d_ff: int
    eps: float = 1e-6
    init: str = 'default'
    inverse_layer_scaling: bool = False
    upcast_attention: bool = True
    gelu_approx: bool = False

    arch = 'transformer'

    @property
    def residual_size(self):
        return self.d_model

    def validate(self):
        _validate_common(self, ('vocab_size', 'max_seq_len', 'd_model',
                                'n_heads', 'd_head', 'd_ff'))
        return self


@dataclass(frozen=True)
class RMTConfig:
    """
    Shape of the residual matrix transformer.

    .. py:attribute:: d_k

      ``D_k``, the key dimension of every residual matrix

    .. py:attribute:: d_v

      ``D_v``, the value dimension; also the attention head width

    .. py:attribute:: rank

      ``R``, the number of key/data channels each layer reads and writes; also
      the number of attention heads. ``rank * d_v`` is the input/output width
      of the core feed-forward operation.

    .. py:attribute:: ln_axis

      ``'matrix'`` (default) or ``'row'``, see
      :py:func:`resmat.memory.matrix_layernorm`
    """
    vocab_size: int
    max_seq_len: int
    d_k: int
    d_v: int
    rank: int
    n_layers: int
    d_ff: int
    eps: float = 1e-6
    init: str = 'default'
    inverse_layer_scaling: bool = False
    upcast_attention: bool = True
    gelu_approx: bool = False
    ln_axis: str = 'matrix'

    arch = 'rmt'

    @property
    def residual_size(self):
        return self.d_k * self.d_v

    def validate(self):
        _validate_common(self, ('vocab_size', 'max_seq_len', 'd_k', 'd_v',
                                'rank', 'd_ff'))
        if self.ln_axis not in ('matrix', 'row'):
            raise ConfigError("Unknown ln_axis {!r}".format(self.ln_axis))
        return self


def _validate_common(config, positive_fields):
    for name in positive_fields:
        if getattr(config, name) < 1:
            raise ConfigError("{} must be positive, got {}".format(
                name, getattr(config, name)))
    if config.n_layers < 0:
        raise ConfigError("n_layers must not be negative")
    if config.eps < 0:
        raise ConfigError("eps must not be negative")
    if config.init not in INIT_MODES:
        raise ConfigError("Unknown init mode {!r}".format(config.init))


MODEL_CLASSES = {
    'transformer': TransformerConfig,
    'rmt': RMTConfig,
}

_MODEL_FACTORIES = {
    'eps': float,
    'init': f_choice(*INIT_MODES),
    'inverse_layer_scaling': f_bool,
    'upcast_attention': f_bool,
    'gelu_approx': f_bool,
    'ln_axis': f_choice('matrix', 'row'),
}


def model_fields(arch):
    """
    :param str arch: ``'transformer'`` or ``'rmt'``
    :returns: ``[(name, factory), ...]`` for the model config of *arch*
    """
    return [(f.name, _MODEL_FACTORIES.get(f.name, f_int))
            for f in fields(MODEL_CLASSES[arch])]


GPT2_VOCAB = 50257

PRESETS = {
    # acceptance-suite shapes
    ('transformer', 'tiny'): TransformerConfig(
        vocab_size=11, max_seq_len=8, d_model=16, n_layers=2, n_heads=2,
        d_head=8, d_ff=32),
    ('rmt', 'tiny'): RMTConfig(
        vocab_size=11, max_seq_len=8, d_k=8, d_v=4, rank=4, n_layers=2,
        d_ff=32),
    # byte-level desk training
    ('transformer', 'desk'): TransformerConfig(
        vocab_size=256, max_seq_len=128, d_model=256, n_layers=3, n_heads=8,
        d_head=32, d_ff=1024),
    ('rmt', 'desk'): RMTConfig(
        vocab_size=256, max_seq_len=128, d_k=64, d_v=32, rank=8, n_layers=3,
        d_ff=1536),
    # scaling-law series
    ('transformer', '49m'): TransformerConfig(
        vocab_size=GPT2_VOCAB, max_seq_len=512, d_model=384, n_layers=6,
        n_heads=12, d_head=32, d_ff=1536),
    ('transformer', '160m'): TransformerConfig(
        vocab_size=GPT2_VOCAB, max_seq_len=512, d_model=768, n_layers=12,
        n_heads=12, d_head=64, d_ff=3072),
    ('transformer', '260m'): TransformerConfig(
        vocab_size=GPT2_VOCAB, max_seq_len=512, d_model=896, n_layers=18,
        n_heads=14, d_head=64, d_ff=3584),
    ('transformer', 'gpt2-medium'): TransformerConfig(
        vocab_size=GPT2_VOCAB, max_seq_len=512, d_model=1024, n_layers=24,
        n_heads=16, d_head=64, d_ff=4096),
    ('rmt', '46m'): RMTConfig(
        vocab_size=GPT2_VOCAB, max_seq_len=512, d_k=32, d_v=32, rank=12,
        n_layers=6, d_ff=1536),
    ('rmt', '134m'): RMTConfig(
        vocab_size=GPT2_VOCAB, max_seq_len=512, d_k=32, d_v=64, rank=12,
        n_layers=12, d_ff=3072),
    ('rmt', '206m'): RMTConfig(
        vocab_size=GPT2_VOCAB, max_seq_len=512, d_k=896, d_v=48, rank=14,
        n_layers=18, d_ff=3584),
    ('rmt', '305m'): RMTConfig(
        vocab_size=GPT2_VOCAB, max_seq_len=512, d_k=1024, d_v=64, rank=16,
        n_layers=24, d_ff=4096),
    # residual stream sweep base: only d_k varies between runs
    ('rmt', 'sweep'): RMTConfig(
        vocab_size=GPT2_VOCAB, max_seq_len=512, d_k=32, d_v=64, rank=12,
        n_layers=12, d_ff=3072),
}
PRESETS[('transformer', '405m')] = PRESETS[('transformer', 'gpt2-medium')]
PRESETS[('rmt', 'gpt2-medium')] = PRESETS[('rmt', '305m')]


def preset(arch, name):
    """
    :param str arch: ``'transformer'`` or ``'rmt'``
    :param str name: preset name, e.g. ``'tiny'`` or ``'gpt2-medium'``

    Raises :py:class:`ConfigError` for unknown names.
    """
    try:
        return PRESETS[(arch, name)]
    except KeyError:
        names = sorted(n for a, n in PRESETS if a == arch)
        raise ConfigError(
            "No {} preset named {!r}; have {}".format(arch, name, names))


@dataclass(frozen=True)
class TrainRunConfig:
    """
    Everything one training run needs. Defaults follow the large-scale setup:
    AdamW with ``betas=(0.9, 0.95)``, decoupled weight decay ``1e-4``, z-loss
    coefficient ``1e-4``, 5% linear warmup and cosine decay to 10% of the max
    learning rate.

    .. py:attribute:: wall_clock

      Defaults to ``True``, which records real elapsed time. Set it to
      ``False`` and metrics record ``wall_seconds = 0.0``, so two runs with the
      same seed write byte-identical metrics files.
    """
    arch: str
    model: object
    seq_len: int = 0
    batch_size: int = 16
    steps: int = 1000
    lr: float = 3e-3
    warmup_frac: float = 0.05
    final_lr_frac: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4
    z_loss_coef: float = 1e-4
    seed: int = 0
    train_corpus: str = None
    dev_corpus: str = None
    dev_frac: float = 0.05
    out_dir: str = None
    log_interval: int = 10
    checkpoint_interval: int = 0
    dtype: str = 'float32'
    wall_clock: bool = True

    def __post_init__(self):
        if not self.seq_len:
            object.__setattr__(self, 'seq_len', self.model.max_seq_len)

    def validate(self):
        if self.arch not in ARCHS:
            raise ConfigError("Unknown arch {!r}".format(self.arch))
        if self.model.arch != self.arch:
            raise ConfigError("Model config is for {!r}, run is {!r}".format(
                self.model.arch, self.arch))
        self.model.validate()
        if not 1 <= self.seq_len <= self.model.max_seq_len:
            raise ConfigError("seq_len must be in [1, {}], got {}".format(
                self.model.max_seq_len, self.seq_len))
        for name in ('batch_size', 'steps', 'log_interval'):
            if getattr(self, name) < 1:
                raise ConfigError("{} must be positive".format(name))
        for name in ('warmup_frac', 'final_lr_frac', 'dev_frac'):
            if not 0 < getattr(self, name) <= 1:
                raise ConfigError("{} must be in (0, 1]".format(name))
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.dtype not in DTYPES:
            raise ConfigError("Unknown dtype {!r}".format(self.dtype))
        return self


RUN_FIELDS = (
    ('seq_len', f_int),
    ('batch_size', f_int),
    ('steps', f_int),
    ('lr', float),
    ('warmup_frac', float),
    ('final_lr_frac', float),
    ('beta1', float),
    ('beta2', float),
    ('adam_eps', float),
    ('weight_decay', float),
    ('z_loss_coef', float),
    ('seed', f_int),
    ('train_corpus', f_optional(str)),
    ('dev_corpus', f_optional(str)),
    ('dev_frac', float),
    ('out_dir', f_optional(str)),
    ('log_interval', f_int),
    ('checkpoint_interval', f_int),
    ('dtype', f_choice(*DTYPES)),
    ('wall_clock', f_bool),
)


class JSONConfigReader:
    """
    Reads a run config from a JSON file.

    .. py:attribute:: path

      Path to the file

    .. py:attribute:: identifier

      String identifier for this reader. Only used to provide helpful
      exception messages.
    """

    def __init__(self, path):
        self.path = path
        self.identifier = str(path)

    def read(self):
        """The decoded JSON object"""
        try:
            with open(self.path) as f:
                values = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ValidationException(
                "Cannot read config {}: {}".format(self.identifier, e))
        if not isinstance(values, dict):
            raise ValidationException(
                "Config {} must hold a JSON object".format(self.identifier))
        return values


def _read_fields(schema, values, identifier):
    known = dict(schema)
    out = {}
    for k, v in values.items():
        if k not in known:
            raise ValidationException(
                "Unknown field {!r} in {}".format(k, identifier))
        try:
            out[k] = known[k](v)
        except (TypeError, ValueError) as e:
            raise ValidationException(
                "Validation error in {}: field {!r} does not match schema: {!r} ({})".format(
                    identifier, k, v, e))
    return out


def parse_override(text):
    """
    :param str text: ``'key=value'``
    :returns: ``(key, value)`` with aliases such as ``dk`` expanded
    """
    if '=' not in text:
        raise ValidationException(
            "Override {!r} is not of the form key=value".format(text))
    k, v = text.split('=', 1)
    k = k.strip()
    return FIELD_ALIASES.get(k, k), v.strip()


def build_run_config(values, overrides=(), identifier='<dict>'):
    """
    :param dict values: decoded config file contents
    :param [str] overrides: ``key=value`` strings; these win over *values*
    :param str identifier: used in exception messages

    Raises :py:class:`ValidationException` for values that don't match the
    schema and :py:class:`ConfigError` for inconsistent configs.
    """
    values = dict(values)
    model_values = dict(values.pop('model', None) or {})
    top_overrides = {}
    model_overrides = {}
    for text in overrides:
        k, v = parse_override(text)
        if k.startswith('model.'):
            model_overrides[k[len('model.'):]] = v
        else:
            top_overrides[k] = v

    arch = top_overrides.pop('arch', values.pop('arch', None))
    preset_name = top_overrides.pop('preset', values.pop('preset', None))
    if arch not in ARCHS:
        raise ValidationException(
            "Config {} must set arch to one of {}, got {!r}".format(
                identifier, ARCHS, arch))

    schema = model_fields(arch)
    model_kwargs = asdict(preset(arch, preset_name)) if preset_name else {}
    model_kwargs.update(_read_fields(schema, model_values, identifier))
    model_kwargs.update(_read_fields(schema, model_overrides, '--override'))
    missing = [name for name, _ in schema
               if name not in model_kwargs and name not in _MODEL_FACTORIES]
    if missing:
        raise ValidationException(
            "Config {} is missing model fields {}".format(identifier, missing))
    model = MODEL_CLASSES[arch](**model_kwargs)

    run_kwargs = _read_fields(RUN_FIELDS, values, identifier)
    run_kwargs.update(_read_fields(RUN_FIELDS, top_overrides, '--override'))
    return TrainRunConfig(arch=arch, model=model, **run_kwargs).validate()


def load_run_config(path, overrides=()):
    """
    :param str path: JSON config file
    :param [str] overrides: ``key=value`` strings
    :returns: validated :py:class:`TrainRunConfig`
    """
    reader = JSONConfigReader(path)
    return build_run_config(reader.read(), overrides, reader.identifier)


def run_config_to_dict(config):
    """JSON-ready dict that :py:func:`build_run_config` reads back unchanged"""
    values = {'arch': config.arch, 'model': asdict(config.model)}
    for name, _ in RUN_FIELDS:
        values[name] = getattr(config, name)
    return values


def model_config_from_dict(arch, values):
    """Rebuild a model config from :py:func:`dataclasses.asdict` output"""
    return MODEL_CLASSES[arch](**_read_fields(model_fields(arch), values, arch))


def with_model(config, **changes):
    """A copy of run *config* with model fields replaced"""
    return replace(config, model=replace(config.model, **changes))
