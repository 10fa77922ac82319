"""Actor / learner / evaluator / bandit orchestration in one process.

Two schedules share the same role objects:

* ``sync``: actors step round-robin on the calling thread and the learner
  consumes batches whenever the samples-per-insert gate allows. With one
  actor this is bit-for-bit deterministic given the seed.
* ``threaded``: every role gets its own thread; roles only talk through the
  replay shards, the bandit request queue, the snapshot register and the
  metrics sink.
"""

from __future__ import annotations

import copy
import json
import queue
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .envbench import Environment, make_env
from .intrinsic import ApEmbedder, EpisodicMemory, IntrinsicConfig, RndPair, rnd_multiplier
from .learner import Learner
from .mixture import DiscountedUCBTuned, MixtureFamily
from .network import AgentNetwork, NumpyPolicy
from .replay import Replay, SequenceBuilder, actor_permit, collate, spi_permit
from .returns import rescale

METRIC_KEYS = ("wall_ms", "frames", "learner_steps", "role", "episode_return", "mixture",
               "mean_lambda", "masked_frac")


def epsilon_ladder(n_actors: int, base: float = 0.4, alpha: float = 7.0) -> list[float]:
    if n_actors == 1:
        return [base]
    return [base ** (1 + alpha * i / (n_actors - 1)) for i in range(n_actors)]


def egreedy_action(probs: np.ndarray, eps: float, rng: np.random.Generator) -> tuple[int, float]:
    """Epsilon-greedy over argmax(probs). Returns (action, behaviour probability)."""
    a_n = probs.shape[-1]
    greedy = int(np.argmax(probs))
    a = int(rng.integers(a_n)) if rng.random() < eps else greedy
    mu = eps / a_n + (1.0 - eps) * (a == greedy)
    return a, float(mu)


class MetricsSink:
    """Append-only JSON-lines records; keeps a copy in memory."""

    def __init__(self, path: str | Path | None = None):
        self.records: list[dict] = []
        self.path = Path(path) if path else None
        self._lock = threading.Lock()
        self._t0 = time.perf_counter()
        self._fh = None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "w", encoding="utf-8")

    def emit(self, **fields) -> dict:
        rec = {k: fields.get(k) for k in METRIC_KEYS}
        rec["wall_ms"] = round((time.perf_counter() - self._t0) * 1000.0, 3)
        for k, v in fields.items():
            if k not in rec:
                rec[k] = v
        with self._lock:
            self.records.append(rec)
            if self._fh:
                self._fh.write(json.dumps(rec) + "\n")
                self._fh.flush()
        return rec

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None


@dataclass(frozen=True)
class Snapshot:
    version: int
    online: dict
    eval_net: dict
    ap: dict
    rnd: dict
    rnd_stats: tuple


class SnapshotRegister:
    """Latest parameter versions; readers always get a complete snapshot."""

    def __init__(self):
        self._lock = threading.Lock()
        self._snap: Snapshot | None = None

    def publish(self, learner: Learner) -> Snapshot:
        def clone(m):
            return {k: v.detach().clone() for k, v in m.state_dict().items()}
        r = learner.rnd
        version = 0 if self._snap is None else self._snap.version + 1
        snap = Snapshot(version, clone(learner.online), clone(learner.eval_net), clone(learner.ap),
                        clone(r), (r.err_mean, r.err_sq, r.initialised))
        with self._lock:
            self._snap = snap
        return snap

    def latest(self) -> Snapshot:
        with self._lock:
            return self._snap


class BanditService:
    """Meta-controller. Call directly (sync) or through ``request`` from a served thread."""

    def __init__(self, n_arms: int, gamma=0.999, beta=1.0, epsilon=0.5, seed=0):
        self.bandit = DiscountedUCBTuned(n_arms, gamma, beta, epsilon)
        self.rng = np.random.default_rng(seed)
        self.updates = 0
        self.requests: queue.Queue = queue.Queue()
        self._thread = None

    def select(self) -> int:
        return self.bandit.select(self.rng)

    def greedy(self) -> int:
        return self.bandit.greedy()

    def update(self, arm: int, ret: float) -> None:
        self.bandit.update(arm, ret)
        self.updates += 1

    def request(self, kind: str, *args):
        if self._thread is None:
            return getattr(self, kind)(*args)
        reply: queue.Queue = queue.Queue(maxsize=1)
        self.requests.put((kind, args, reply))
        return reply.get()

    def serve(self, stop: threading.Event) -> None:
        while not stop.is_set() or not self.requests.empty():
            try:
                kind, args, reply = self.requests.get(timeout=0.01)
            except queue.Empty:
                continue
            reply.put(getattr(self, kind)(*args))

    def start(self, stop: threading.Event) -> None:
        self._thread = threading.Thread(target=self.serve, args=(stop,), daemon=True)
        self._thread.start()

    def join(self) -> None:
        if self._thread:
            self._thread.join()
            self._thread = None


class _Policy:
    """Actor- or evaluator-side copies of the networks, refreshed from snapshots."""

    def __init__(self, template: Learner, use_eval: bool):
        self.net: AgentNetwork = copy.deepcopy(template.online).eval()
        self.ap: ApEmbedder = copy.deepcopy(template.ap).eval()
        self.rnd: RndPair = copy.deepcopy(template.rnd).eval()
        self.use_eval = use_eval
        self.version = -1
        self.dtype = template.dtype
        self._cache: dict = {}
        self.fast = NumpyPolicy(self.net)

    def refresh(self, snap: Snapshot) -> None:
        if snap is None or snap.version == self.version:
            return
        self.net.load_state_dict(snap.eval_net if self.use_eval else snap.online)
        self.ap.load_state_dict(snap.ap)
        self.rnd.load_state_dict(snap.rnd)
        self.rnd.err_mean, self.rnd.err_sq, self.rnd.initialised = snap.rnd_stats
        self.version = snap.version
        self._cache.clear()
        self.fast = NumpyPolicy(self.net)

    @torch.no_grad()
    def embed(self, obs: np.ndarray):
        """(AP embedding, RND error) for one observation, cached per snapshot."""
        key = obs.tobytes()
        hit = self._cache.get(key)
        if hit is None:
            x = torch.as_tensor(obs, dtype=self.dtype)[None]
            hit = (self.ap(x)[0].numpy().astype(np.float64), float(self.rnd.error(x)[0]))
            self._cache[key] = hit
        return hit


class EpisodeRunner:
    """Shared per-step logic of actors and evaluators."""

    def __init__(self, env: Environment, policy: _Policy, int_cfg: IntrinsicConfig,
                 n_actions: int, hidden: int):
        self.env = env
        self.policy = policy
        self.int_cfg = int_cfg
        self.memory = EpisodicMemory.from_config(int_cfg)
        self.n_actions = n_actions
        self.hidden = hidden
        self.obs = None
        self.episode_return = 0.0
        self.t = 0

    def begin(self) -> None:
        self.memory.reset()
        self.obs = self.env.reset()
        self.prev_action = self.n_actions
        self.scalars = np.zeros(4, dtype=np.float32)
        emb, _ = self.policy.embed(self.obs)
        self.memory.reward(emb)
        self.ap_feat = emb
        self.state = np.zeros(self.hidden)
        self.episode_return = 0.0
        self.t = 0

    def policy_probs(self, mixture: int):
        logits, new_state = self.policy.fast.step(self.obs, self.prev_action, self.scalars,
                                                  self.ap_feat, self.state)
        z = logits[mixture] - logits[mixture].max()
        probs = np.exp(z) / np.exp(z).sum()
        return probs, new_state

    def transition(self, action: int):
        """Environment step plus intrinsic reward on the next observation."""
        nxt, r_e, done = self.env.step(action)
        emb, err = self.policy.embed(nxt)
        r_ep = self.memory.reward(emb)
        mult = float(rnd_multiplier(self.policy.rnd.modulator(err), self.int_cfg.rnd_scale,
                                    self.int_cfg.L_cap))
        r_ngu = r_ep * mult
        return nxt, float(r_e), bool(done), emb, r_ep, mult, r_ngu

    def advance(self, nxt, action, r_e, r_ngu, mult, r_ep, emb, new_state) -> None:
        self.obs = nxt
        self.prev_action = action
        self.scalars = np.array([rescale(r_e), rescale(r_ngu), mult, r_ep], dtype=np.float32)
        self.ap_feat = emb
        self.state = new_state
        self.episode_return += r_e
        self.t += 1


class Actor:
    def __init__(self, idx: int, env: Environment, learner: Learner, register: SnapshotRegister,
                 replay: Replay, bandit: BanditService, epsilon: float, int_cfg: IntrinsicConfig,
                 trace_length: int, period: int, seed: int):
        self.idx = idx
        self.policy = _Policy(learner, use_eval=False)
        self.runner = EpisodeRunner(env, self.policy, int_cfg, learner.n_actions,
                                    learner.net_cfg.core_hidden)
        self.register, self.replay, self.bandit = register, replay, bandit
        self.epsilon = epsilon
        self.rng = np.random.default_rng(seed)
        self.shard = idx % len(replay.shards)
        self.builder = SequenceBuilder(trace_length, period, env.obs_dim, int_cfg.embed_dim)
        self.episodes = 0
        self.in_episode = False
        self.mixture = 0
        self.faults = 0

    def _begin(self) -> None:
        self.policy.refresh(self.register.latest())
        self.mixture = int(self.bandit.request("select"))
        self.builder.begin(self.mixture, self.episodes)
        self.runner.begin()
        self.in_episode = True

    def step(self):
        """One environment frame. Returns a finished-episode record or None."""
        if not self.in_episode:
            self._begin()
        run = self.runner
        probs, new_state = run.policy_probs(self.mixture)
        action, mu = egreedy_action(probs, self.epsilon, self.rng)
        state_before = run.state.copy()
        obs_before, prev_a, scal, ap_feat = run.obs, run.prev_action, run.scalars, run.ap_feat
        try:
            nxt, r_e, done, emb, r_ep, mult, r_ngu = run.transition(action)
        except Exception as exc:  # environment fault: drop the episode and start over
            self.faults += 1
            self.in_episode = False
            self.builder.begin(self.mixture, self.episodes)
            return {"fault": repr(exc)}
        for seq in self.builder.add(obs=obs_before, next_obs=nxt, prev_action=prev_a, scalars=scal,
                                    ap=ap_feat, action=action, mu=mu, r_e=r_e, r_i=r_ngu,
                                    done=done, state=state_before):
            self.replay.insert(seq, self.shard)
        run.advance(nxt, action, r_e, r_ngu, mult, r_ep, emb, new_state)
        if not done:
            return None
        for seq in self.builder.finish():
            self.replay.insert(seq, self.shard)
        self.bandit.request("update", self.mixture, run.episode_return)
        self.episodes += 1
        self.in_episode = False
        return {"episode_return": run.episode_return, "mixture": self.mixture, "length": run.t}


class Evaluator:
    """Greedy arm, greedy actions, eval parameters; never touches replay."""

    def __init__(self, env: Environment, learner: Learner, register: SnapshotRegister,
                 bandit: BanditService, int_cfg: IntrinsicConfig):
        self.policy = _Policy(learner, use_eval=True)
        self.runner = EpisodeRunner(env, self.policy, int_cfg, learner.n_actions,
                                    learner.net_cfg.core_hidden)
        self.register, self.bandit = register, bandit

    def episode(self) -> dict:
        self.policy.refresh(self.register.latest())
        mixture = int(self.bandit.request("greedy"))
        run = self.runner
        run.begin()
        done, actions = False, []
        while not done:
            probs, new_state = run.policy_probs(mixture)
            action = int(np.argmax(probs))
            actions.append(action)
            nxt, r_e, done, emb, r_ep, mult, r_ngu = run.transition(action)
            run.advance(nxt, action, r_e, r_ngu, mult, r_ep, emb, new_state)
        return {"episode_return": run.episode_return, "mixture": mixture, "length": run.t,
                "actions": actions}


@dataclass
class RunResult:
    metrics: list
    frames: int
    learner_steps: int
    inserts: int
    samples: int
    solved_at: int | None
    best_eval: float | None
    faults: int = 0
    sequences_seen: list | None = None


class Run:
    """Builds every role from a full config; see ``meme.config.RunConfig``."""

    def __init__(self, cfg, metrics_path=None):
        self.cfg = cfg
        rt = cfg.runtime
        torch.set_num_threads(max(1, rt.torch_threads))
        seeds = np.random.SeedSequence(rt.seed).spawn(4 + 2 * rt.n_actors + max(rt.n_eval, 1))
        ints = [int(s.generate_state(1)[0]) for s in seeds]
        env_params = cfg.env.params()
        probe = make_env(cfg.env.name, **env_params)
        self.family = MixtureFamily.build(cfg.mixtures.n, cfg.mixtures.beta_im,
                                          cfg.mixtures.gamma_max, cfg.mixtures.gamma_min)
        self.learner = Learner(probe.obs_dim, probe.n_actions, self.family, cfg.net, cfg.returns,
                               cfg.loss, cfg.optimizer, cfg.intrinsic, seed=ints[0])
        self.replay = Replay(cfg.replay)
        self.register = SnapshotRegister()
        self.register.publish(self.learner)
        b = cfg.bandit
        self.bandit = BanditService(self.family.n, b.gamma, b.beta, b.epsilon, seed=ints[1])
        self.sample_rng = np.random.default_rng(ints[2])
        eps = rt.actor_epsilons or epsilon_ladder(rt.n_actors, rt.epsilon_base, rt.epsilon_alpha)
        self.actors = [Actor(i, make_env(cfg.env.name, **env_params), self.learner, self.register,
                             self.replay, self.bandit, eps[i], cfg.intrinsic,
                             cfg.replay.trace_length, cfg.replay.period, ints[4 + i])
                       for i in range(rt.n_actors)]
        self.evaluators = [Evaluator(make_env(cfg.env.name, **env_params), self.learner,
                                     self.register, self.bandit, cfg.intrinsic)
                           for _ in range(rt.n_eval)]
        self.optimal = probe.optimal_return()
        self.metrics = MetricsSink(metrics_path)
        self.frames = 0
        self.solved_at = None
        self.best_eval = None
        self.track_sequences = False
        self.sequences_seen: list = []
        self._lock = threading.Lock()

    # -- shared pieces ----------------------------------------------------------------
    def _learner_step(self) -> None:
        rt = self.cfg.runtime
        seqs, w, handles, _ = self.replay.sample(rt.batch_size, self.sample_rng)
        if self.track_sequences:
            self.sequences_seen.extend((s.episode, s.start, tuple(s.steps)) for s in seqs)
        prios, diag = self.learner.step(collate(seqs), w)
        self.replay.update_priorities(handles, prios)
        if self.learner.steps % rt.publish_every == 0:
            self.register.publish(self.learner)
        if self.learner.steps % rt.log_every == 0:
            self.metrics.emit(frames=self.frames, learner_steps=self.learner.steps, role="learner",
                              mean_lambda=diag["mean_lambda"], masked_frac=diag["masked_frac"],
                              loss=diag["value"])
        if rt.checkpoint_every and self.learner.steps % rt.checkpoint_every == 0 and rt.out_dir:
            self.save_checkpoint(Path(rt.out_dir) / f"ckpt_{self.learner.steps}.pt")

    def _evaluate(self) -> None:
        for ev in self.evaluators:
            res = ev.episode()
            ret = res["episode_return"]
            self.best_eval = ret if self.best_eval is None else max(self.best_eval, ret)
            self.metrics.emit(frames=self.frames, learner_steps=self.learner.steps, role="evaluator",
                              episode_return=ret, mixture=res["mixture"])
            thr = self.cfg.runtime.solve_fraction * self.optimal
            if self.solved_at is None and _reached(ret, thr, self.optimal):
                self.solved_at = self.frames

    def _record_actor(self, actor: Actor, res: dict) -> None:
        if "fault" in res:
            self.metrics.emit(frames=self.frames, learner_steps=self.learner.steps,
                              role="actor_fault", error=res["fault"])
            return
        self.metrics.emit(frames=self.frames, learner_steps=self.learner.steps, role="actor",
                          episode_return=res["episode_return"], mixture=res["mixture"])

    def _stop_early(self) -> bool:
        return self.cfg.runtime.stop_on_solve and self.solved_at is not None

    def save_checkpoint(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        lr = self.learner
        torch.save({"online": lr.online.state_dict(), "target": lr.target.state_dict(),
                    "eval": lr.eval_net.state_dict(), "ap": lr.ap.state_dict(),
                    "rnd": lr.rnd.state_dict(), "bandit": self.bandit.bandit.state_dict(),
                    "stats": lr.stats.state_dict(), "learner_steps": lr.steps,
                    "frames": self.frames}, path)

    def _result(self) -> RunResult:
        self.metrics.close()
        return RunResult(self.metrics.records, self.frames, self.learner.steps, self.replay.inserts,
                         self.replay.samples, self.solved_at, self.best_eval,
                         sum(a.faults for a in self.actors),
                         self.sequences_seen if self.track_sequences else None)

    def _can_learn(self) -> bool:
        rt = self.cfg.runtime
        return (self.replay.inserts >= self.cfg.replay.min_inserts
                and spi_permit(self.replay.inserts, self.replay.samples, self.cfg.replay.spi,
                               rt.batch_size))

    # -- schedules ------------------------------------------------------------------
    def run_sync(self) -> RunResult:
        rt = self.cfg.runtime
        next_eval = rt.eval_every
        while self.frames < rt.frames and not self._stop_early():
            for actor in self.actors:
                if self.frames >= rt.frames:
                    break
                res = actor.step()
                self.frames += 1
                if res is not None:
                    self._record_actor(actor, res)
                while self._can_learn():
                    self._learner_step()
            if self.evaluators and self.frames >= next_eval:
                self._evaluate()
                next_eval += rt.eval_every
        if self.evaluators and rt.frames > 0 and not self._stop_early():
            self._evaluate()
        return self._result()

    def run_threaded(self) -> RunResult:
        rt = self.cfg.runtime
        stop = threading.Event()
        self.bandit.start(stop)
        slack = rt.batch_size + self.cfg.replay.spi * max(1, self.cfg.replay.trace_length)
        errors: list = []

        def actor_loop(actor: Actor):
            try:
                while not stop.is_set():
                    with self._lock:
                        if self.frames >= rt.frames or self._stop_early():
                            break
                        self.frames += 1
                    while (not stop.is_set() and self.replay.inserts >= self.cfg.replay.min_inserts
                           and not actor_permit(self.replay.inserts, self.replay.samples,
                                                self.cfg.replay.spi, slack)):
                        time.sleep(0.0005)
                    res = actor.step()
                    if res is not None:
                        self._record_actor(actor, res)
            except Exception as exc:  # pragma: no cover - surfaced below
                errors.append(exc)
                stop.set()

        def learner_loop():
            try:
                while not stop.is_set():
                    if self._can_learn():
                        self._learner_step()
                    else:
                        time.sleep(0.0005)
            except Exception as exc:
                errors.append(exc)
                stop.set()

        def eval_loop():
            try:
                next_eval = rt.eval_every
                while not stop.is_set():
                    if self.frames >= next_eval:
                        self._evaluate()
                        next_eval += rt.eval_every
                    else:
                        time.sleep(0.005)
            except Exception as exc:
                errors.append(exc)
                stop.set()

        threads = [threading.Thread(target=actor_loop, args=(a,), daemon=True) for a in self.actors]
        aux = [threading.Thread(target=learner_loop, daemon=True)]
        if self.evaluators:
            aux.append(threading.Thread(target=eval_loop, daemon=True))
        for t in threads + aux:
            t.start()
        for t in threads:
            t.join()
        # let the learner drain what the gate still allows, then stop everyone
        deadline = time.perf_counter() + rt.drain_seconds
        while self._can_learn() and time.perf_counter() < deadline and not errors:
            time.sleep(0.001)
        stop.set()
        for t in aux:
            t.join()
        self.bandit.join()
        if errors:
            raise errors[0]
        if self.evaluators and rt.frames > 0:
            self._evaluate()
        return self._result()

    def run(self) -> RunResult:
        if self.cfg.runtime.mode == "sync":
            return self.run_sync()
        return self.run_threaded()


def _reached(ret: float, thr: float, optimal: float) -> bool:
    # thresholds are fractions of a positive optimum; a negative scale flips the comparison
    return ret >= thr if optimal >= 0 else ret <= thr


def run(cfg, metrics_path=None) -> RunResult:
    return Run(cfg, metrics_path).run()
