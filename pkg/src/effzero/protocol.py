"""Newline-delimited JSON environment protocol over a child-process pipe.

Wire format (one JSON object per line, UTF-8, see docs/PROTOCOL.md):

    -> {"cmd": "spec"}                 <- {"action_space": 3, "shape": [2, 5, 5]}
    -> {"cmd": "reset", "seed": 7}     <- {"pixels": "<b64>", "shape": [...], "reward": 0.0, "done": false}
    -> {"cmd": "step", "action": 1}    <- {"pixels": "<b64>", "shape": [...], "reward": 1.0, "done": true}
    -> {"cmd": "close"}                <- {"ok": true}

Any request may instead be answered with {"error": "<message>"}. Pixels are
float32 little-endian, C order, base64 (RFC 4648 standard alphabet).
"""

import argparse
import base64
import json
import logging
import subprocess
import sys
from typing import Any, Dict, List, Optional, Sequence, TextIO

import numpy as np

from effzero.env import Environment, EpisodeFinishedError, build_env
from effzero.types import StepResult

logger = logging.getLogger(__name__)


class ProtocolError(RuntimeError):
    """Raised when the environment child process misbehaves or reports an error."""


def encode_pixels(pixels: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(pixels, dtype="<f4").tobytes()).decode("ascii")


def decode_pixels(payload: str, shape: Sequence[int]) -> np.ndarray:
    raw = base64.b64decode(payload)
    return np.frombuffer(raw, dtype="<f4").reshape(tuple(shape)).astype(np.float32)


class ProtocolEnv(Environment):
    """Client side: drives an environment living in a child process.

    Args:
        command: argv of the child process
        frame_skip: each ``step`` repeats the action this many times, summing rewards
    """

    default_reward_clipping = True
    close_timeout = 5.0

    def __init__(self, command: List[str], frame_skip: int = 1, seed: int = 0):
        if frame_skip < 1:
            raise ValueError(f"frame_skip must be >= 1, got {frame_skip}")
        self.command = list(command)
        self.frame_skip = frame_skip
        self._pending_seed: Optional[int] = seed
        self._done = True
        self._process = subprocess.Popen(
            self.command,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            text=True,
            bufsize=1,
        )
        try:
            reply = self._request({"cmd": "spec"})
        except ProtocolError:
            self._kill()
            raise
        self.action_space = int(reply["action_space"])
        self.observation_shape = tuple(int(x) for x in reply["shape"])  # type: ignore

    @property
    def name(self) -> str:
        return "protocol"

    def _request(self, message: Dict[str, Any]) -> Dict[str, Any]:
        if self._process.poll() is not None:
            raise ProtocolError(
                f"Environment process exited with code {self._process.returncode}"
            )
        assert self._process.stdin is not None and self._process.stdout is not None
        try:
            self._process.stdin.write(json.dumps(message) + "\n")
            self._process.stdin.flush()
            line = self._process.stdout.readline()
        except (BrokenPipeError, OSError) as e:
            raise ProtocolError(f"Pipe to environment process failed: {e}") from e
        if not line:
            raise ProtocolError("Environment process closed its output")
        try:
            reply = json.loads(line)
        except json.JSONDecodeError as e:
            raise ProtocolError(f"Malformed reply {line!r}: {e}") from e
        if "error" in reply:
            raise ProtocolError(f"Environment error: {reply['error']}")
        return reply

    def reset(self, seed: Optional[int] = None) -> np.ndarray:
        """Start an episode; the constructor seed goes out with the first reset only."""
        pending, self._pending_seed = self._pending_seed, None
        if seed is None:
            seed = pending
        request: Dict[str, Any] = {"cmd": "reset"}
        if seed is not None:
            request["seed"] = seed
        reply = self._request(request)
        self._done = bool(reply["done"])
        return decode_pixels(reply["pixels"], reply["shape"])

    def step(self, action: int) -> StepResult:
        if self._done:
            raise EpisodeFinishedError("Protocol episode is over; call reset()")
        action = self._check_action(action)
        total = 0.0
        for _ in range(self.frame_skip):
            reply = self._request({"cmd": "step", "action": action})
            total += float(reply["reward"])
            if reply["done"]:
                break
        self._done = bool(reply["done"])
        return StepResult(
            observation=decode_pixels(reply["pixels"], reply["shape"]),
            reward=total,
            done=self._done,
        )

    def clone_state(self) -> Any:
        raise ProtocolError("Protocol environments do not expose their state")

    def restore_state(self, state: Any) -> None:
        raise ProtocolError("Protocol environments do not expose their state")

    def close(self) -> None:
        if self._process.poll() is None:
            try:
                self._request({"cmd": "close"})
            except ProtocolError:
                pass
            try:
                self._process.wait(timeout=self.close_timeout)
            except subprocess.TimeoutExpired:
                logger.warning(f"Environment process {self.command[0]} ignored close; killing it")
                self._kill()

    def _kill(self) -> None:
        if self._process.poll() is None:
            self._process.kill()
        self._process.wait()


def open_env(config: Any, seed: int = 0) -> Environment:
    """The run's environment: a protocol child process if ``env_command`` is set, else a built-in."""
    if config.env_command:
        return ProtocolEnv(config.env_command, frame_skip=config.frame_skip, seed=seed)
    return build_env(config.env_name, seed=seed, options=config.env_options)


def _observation_reply(observation: np.ndarray, reward: float, done: bool) -> Dict[str, Any]:
    return {
        "pixels": encode_pixels(observation),
        "shape": list(observation.shape),
        "reward": reward,
        "done": done,
    }


def serve(env: Environment, stdin: TextIO, stdout: TextIO) -> None:
    """Server side: answer protocol requests for ``env`` until close or EOF."""
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        try:
            request = json.loads(line)
            cmd = request.get("cmd")
            if cmd == "spec":
                reply: Dict[str, Any] = {
                    "action_space": env.action_space,
                    "shape": list(env.observation_shape),
                }
            elif cmd == "reset":
                reply = _observation_reply(env.reset(seed=request.get("seed")), 0.0, False)
            elif cmd == "step":
                result = env.step(int(request["action"]))
                reply = _observation_reply(result.observation, result.reward, result.done)
            elif cmd == "close":
                stdout.write(json.dumps({"ok": True}) + "\n")
                stdout.flush()
                return
            else:
                reply = {"error": f"unknown command {cmd!r}"}
        except (ValueError, KeyError, EpisodeFinishedError) as e:
            reply = {"error": str(e)}
        stdout.write(json.dumps(reply) + "\n")
        stdout.flush()


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Serve a built-in environment: ``python -m effzero.protocol catcher --seed 3``."""
    parser = argparse.ArgumentParser(prog="effzero-env-server")
    parser.add_argument("env", help="registered environment name")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument(
        "--option", action="append", default=[], metavar="KEY=INT",
        help="integer constructor option, repeatable",
    )
    args = parser.parse_args(argv)
    options = {}
    for item in args.option:
        key, _, value = item.partition("=")
        options[key] = int(value)
    serve(build_env(args.env, seed=args.seed, options=options), sys.stdin, sys.stdout)
    return 0


if __name__ == "__main__":
    sys.exit(main())
