"""Decorators for registering environments by name."""

from typing import Any, Callable, Dict, List, Type

ENV_REGISTRY: Dict[str, Type] = {}


def environment(name: str, version: str = "1.0.0") -> Callable:
    """
    Decorator to register an environment class under a name.

    Args:
        name: Environment name used by configs and the CLI
        version: Environment version (default: "1.0.0")

    Returns:
        The class, unchanged apart from registry metadata

    Example:
        @environment("catcher")
        class Catcher(Environment):
            ...
    """

    def decorator(cls: Type) -> Type:
        if name in ENV_REGISTRY and ENV_REGISTRY[name] is not cls:
            raise ValueError(f"Environment {name!r} is already registered")
        cls._env_name = name  # type: ignore
        cls._env_version = version  # type: ignore
        ENV_REGISTRY[name] = cls
        return cls

    return decorator


def available_envs() -> List[str]:
    """Names of every registered environment, sorted."""
    return sorted(ENV_REGISTRY)


def make_env(name: str, **kwargs: Any) -> Any:
    """Instantiate a registered environment.

    Raises:
        ValueError: If no environment is registered under ``name``; the
            message lists the available ones
    """
    try:
        cls = ENV_REGISTRY[name]
    except KeyError:
        raise ValueError(
            f"Unknown environment {name!r}; available: {', '.join(available_envs())}"
        ) from None
    return cls(**kwargs)
