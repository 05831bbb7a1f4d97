import dataclasses
import json
from pathlib import Path
from typing import Any, Dict, Optional, Type, TypeVar

from .errors import UsageError

CONFIG_PATH = Path(__file__).parent.parent / "config.json"

T = TypeVar("T")


def load_config(path: Optional[Path] = None) -> Dict[str, Any]:
    p = Path(path) if path else CONFIG_PATH
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except Exception:
        return {}


def build_section(cfg: Dict[str, Any], name: str, cls: Type[T], **overrides: Any) -> T:
    """Merge cfg[name] and overrides onto the defaults of dataclass cls.

    Overrides whose value is None are ignored so argparse defaults can be
    passed straight through.
    """
    section = dict(cfg.get(name) or {})
    section.update({k: v for k, v in overrides.items() if v is not None})
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(section) - known)
    if unknown:
        raise UsageError(
            f"unknown key(s) in config section '{name}': {', '.join(unknown)}",
            context={"section": name, "keys": unknown},
        )
    try:
        return cls(**section)
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid config section '{name}': {e}") from e


def mfcc_config(cfg: Dict[str, Any], **overrides: Any):
    from .frontend import MfccConfig

    return build_section(cfg, "mfcc", MfccConfig, **overrides)


def train_config(cfg: Dict[str, Any], **overrides: Any):
    from .trainer import TrainConfig

    return build_section(cfg, "train", TrainConfig, **overrides)


def corpus_config(cfg: Dict[str, Any], **overrides: Any):
    from .dataset import CorpusConfig

    return build_section(cfg, "corpus", CorpusConfig, **overrides)
