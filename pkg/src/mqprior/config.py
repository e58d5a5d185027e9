"""Run configuration: a flat registry of namespaced key=value settings.

The config surface is a plain text format — one `key = value` per line,
`#` comments — so runs are trivially diffable.  Every tunable of every
subsystem lives here under a namespace prefix (world., model., distill.,
ppo., metrics.); unknown keys are rejected.
"""

from .autodiff import ContractError
from .imitation import DistillConfig
from .task import PpoConfig

# key -> (default, type tag).  Type tags: int, float, str, ints (comma
# separated integers), strs (comma separated strings).
REGISTRY = {
    "seed": (0, "int"),
    "output_dir": ("runs", "str"),
    # dataset generation
    "world.families": ("circle,lemniscate,dash,spiral,zigzag", "strs"),
    "world.clips_per_family": (20, "int"),
    "world.clip_seconds": (4.0, "float"),
    # latent model architecture
    "model.kind": ("hybrid", "str"),
    "model.latent_dim": (8, "int"),
    "model.hidden": ("64,64", "ints"),
    "model.n_books": (4, "int"),
    "model.total_codes": (32, "int"),
    "model.code_scale": (0.1, "float"),
    # imitation (distillation) phase
    "distill.alpha": (0.05, "float"),
    "distill.beta": (1.0, "float"),
    "distill.gamma_start": (0.1, "float"),
    "distill.gamma_end": (1.0, "float"),
    "distill.kl_start": (0.05, "float"),
    "distill.kl_end": (0.5, "float"),
    "distill.action_weight": (1.0, "float"),
    "distill.horizon": (16, "int"),
    "distill.envs": (8, "int"),
    "distill.lr": (2e-4, "float"),
    "distill.steps": (5000, "int"),
    "distill.eval_every": (200, "int"),
    "distill.eval_clips": (4, "int"),
    "distill.reset_every": (50, "int"),
    "distill.reset_threshold": (1e-3, "float"),
    "distill.dropout": (1, "int"),  # 0 trains with all stages active
    # task (PPO) phase
    "ppo.gamma": (0.99, "float"),
    "ppo.lam": (0.95, "float"),
    "ppo.clip": (0.1, "float"),
    "ppo.lr": (5e-5, "float"),
    "ppo.horizon": (16, "int"),
    "ppo.envs": (16, "int"),
    "ppo.epochs": (4, "int"),
    "ppo.minibatches": (4, "int"),
    "ppo.entropy_coef": (0.003, "float"),
    "ppo.updates": (500, "int"),
    "ppo.eval_every": (100, "int"),
    "ppo.m": (1, "int"),  # active codebooks for the high-level policy
    # unconditional-generation metrics
    "metrics.threshold": (5.0, "float"),
    "metrics.episodes": (8, "int"),
    "metrics.seconds": (30.0, "float"),
    "metrics.m": (0, "int"),  # 0 = use all books
    "metrics.coverage_mode": ("nearest", "str"),
}


def _parse_value(key, raw):
    kind = REGISTRY[key][1]
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "ints":
            return tuple(int(p) for p in raw.split(",") if p.strip())
        if kind == "strs":
            return tuple(p.strip() for p in raw.split(",") if p.strip())
        return raw
    except ValueError as exc:
        raise ContractError(f"bad value for {key}: {raw!r}") from exc


def default_config():
    return {k: _parse_value(k, str(default)) if kind != "str" else default
            for k, (default, kind) in REGISTRY.items()}


def parse_config_text(text):
    """Parse key=value lines into raw strings; rejects malformed lines."""
    raw = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractError(f"malformed config line {lineno}: {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in REGISTRY:
            raise ContractError(f"unknown config key {key!r}")
        raw[key] = value
    return raw


def load_config(path=None, overrides=()):
    """Defaults, then the config file, then `key=value` override strings."""
    cfg = default_config()
    raw = {}
    if path is not None:
        with open(path) as fh:
            raw.update(parse_config_text(fh.read()))
    for item in overrides:
        raw.update(parse_config_text(item))
    for key, value in raw.items():
        cfg[key] = _parse_value(key, value)
    return cfg


def format_config(cfg):
    """Canonical text form (registry order); parses back to the same config."""
    lines = []
    for key in REGISTRY:
        value = cfg[key]
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def distill_config(cfg):
    return DistillConfig(
        alpha=cfg["distill.alpha"],
        beta=cfg["distill.beta"],
        gamma_start=cfg["distill.gamma_start"],
        gamma_end=cfg["distill.gamma_end"],
        kl_start=cfg["distill.kl_start"],
        kl_end=cfg["distill.kl_end"],
        action_weight=cfg["distill.action_weight"],
        horizon=cfg["distill.horizon"],
        envs=cfg["distill.envs"],
        lr=cfg["distill.lr"],
        steps=cfg["distill.steps"],
        seed=cfg["seed"],
        eval_every=cfg["distill.eval_every"],
        eval_clips=cfg["distill.eval_clips"],
        reset_every=cfg["distill.reset_every"],
        reset_threshold=cfg["distill.reset_threshold"],
        dropout=bool(cfg["distill.dropout"]),
        hidden=cfg["model.hidden"],
        latent_dim=cfg["model.latent_dim"],
        total_codes=cfg["model.total_codes"],
        n_books=cfg["model.n_books"],
    )


def ppo_config(cfg):
    return PpoConfig(
        gamma=cfg["ppo.gamma"],
        lam=cfg["ppo.lam"],
        clip=cfg["ppo.clip"],
        lr=cfg["ppo.lr"],
        horizon=cfg["ppo.horizon"],
        envs=cfg["ppo.envs"],
        epochs=cfg["ppo.epochs"],
        minibatches=cfg["ppo.minibatches"],
        entropy_coef=cfg["ppo.entropy_coef"],
        updates=cfg["ppo.updates"],
        seed=cfg["seed"],
        eval_every=cfg["ppo.eval_every"],
        hidden=cfg["model.hidden"],
    )
