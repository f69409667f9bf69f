"""Tree-speculative decoding with static lookahead rows.

Each decode step feeds the last verified token, the current draft tree, and
m static "forecast" embedding rows per token row.  The model's logits at the
token rows verify the drafts (greedy: a child is accepted iff it equals the
argmax at its parent's row), while the logits at the accepted frontier's
forecast rows seed the next tree.  Greedy verification makes the scheme
lossless: the emitted stream equals vanilla greedy decoding token for token,
whatever the drafts were.

Row budget: a branch configuration (b1..bm) yields N = sum of prefix
products drafts, (1+N) token rows and m forecast rows per token row, so
(1+N)*(1+m) input rows, kept within a fixed budget (default 32).

Draft quality is pluggable ("drafters"): the model's own forecast logits,
random tokens, a lookahead oracle, or a noisy oracle with a tunable
acceptance probability.  The decode mechanism is identical in every mode.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import BudgetError, CapacityError, ShapeError
from .model import (NEG, AttentionMask, DecodeSession, ModelWeights, forward,
                    greedy_decode)

DEFAULT_ROW_BUDGET = 32


@dataclass(frozen=True)
class BranchConfig:
    branches: tuple
    row_budget: int = DEFAULT_ROW_BUDGET

    def __post_init__(self):
        object.__setattr__(self, "branches", tuple(int(b) for b in self.branches))
        if not self.branches or any(b < 1 for b in self.branches):
            raise ShapeError(f"branches must be >= 1, got {self.branches}")
        if self.total_rows > self.row_budget:
            raise BudgetError(
                f"config {self.branches} needs {self.total_rows} rows, "
                f"budget is {self.row_budget}")

    @property
    def depth(self) -> int:
        return len(self.branches)

    @property
    def draft_count(self) -> int:
        total, prod = 0, 1
        for b in self.branches:
            prod *= b
            total += prod
        return total

    @property
    def token_rows(self) -> int:
        return 1 + self.draft_count

    @property
    def total_rows(self) -> int:
        return self.token_rows * (1 + self.depth)

    def label(self) -> str:
        return ",".join(str(b) for b in self.branches)


def parse_branch_config(text: str, row_budget: int = DEFAULT_ROW_BUDGET) -> BranchConfig:
    return BranchConfig(tuple(int(x) for x in text.split(",")), row_budget)


def enumerate_branch_configs(row_budget: int = DEFAULT_ROW_BUDGET,
                             max_depth: int = 4) -> list[BranchConfig]:
    """All configs fitting the budget, sorted by total_rows descending then
    lexicographically by branches."""
    if row_budget < 2:
        raise ShapeError("row budget must be >= 2")
    found = []

    def grow(prefix, drafts, prod):
        depth = len(prefix)
        if depth:
            found.append(BranchConfig(tuple(prefix), row_budget))
        if depth == max_depth:
            return
        b = 1
        while True:
            new_drafts = drafts + prod * b
            if (1 + new_drafts) * (1 + depth + 1) > row_budget:
                break
            grow(prefix + [b], new_drafts, prod * b)
            b += 1

    grow([], 0, 1)
    found.sort(key=lambda c: (-c.total_rows, c.branches))
    return found


@dataclass
class ForecastState:
    """Static lookahead rows: a prefix block and one embedding per depth."""

    prefix: np.ndarray  # (p, E)
    slots: np.ndarray   # (m_max, E)

    def __post_init__(self):
        self.prefix = np.asarray(self.prefix, dtype=np.float32)
        self.slots = np.asarray(self.slots, dtype=np.float32)
        if not (np.isfinite(self.prefix).all() and np.isfinite(self.slots).all()):
            raise ShapeError("forecast rows must be finite")

    @property
    def prefix_len(self) -> int:
        return self.prefix.shape[0]

    @property
    def max_depth(self) -> int:
        return self.slots.shape[0]

    @classmethod
    def random(cls, embed_dim, prefix_len=4, max_depth=4, seed=0):
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0xF0)))
        return cls(prefix=rng.normal(0, 0.02, (prefix_len, embed_dim)),
                   slots=rng.normal(0, 0.02, (max_depth, embed_dim)))


@dataclass
class DraftTree:
    """Token tree below the last verified token (node 0 = root).

    Nodes are in breadth-first order; the per-depth candidate sets repeat
    under every parent, so node count is 1 + N for config (b1..bm).
    """

    config: BranchConfig
    tokens: list[int]       # per node; tokens[0] = last verified token
    depths: list[int]
    parents: list[int]      # -1 for the root
    ranks: list[int]        # candidate rank within the parent's fan-out

    def __post_init__(self):
        if len(self.tokens) != self.config.token_rows:
            raise ShapeError(
                f"tree has {len(self.tokens)} nodes, config wants "
                f"{self.config.token_rows}")
        for v in range(1, len(self.tokens)):
            chain = 0
            node = v
            while node != 0:
                node = self.parents[node]
                chain += 1
                if chain > self.config.depth:
                    raise ShapeError(f"node {v} does not reach the root")

    @property
    def n_nodes(self) -> int:
        return len(self.tokens)

    def children(self, v: int) -> list[int]:
        return [i for i, p in enumerate(self.parents) if p == v]

    def ancestors(self, v: int) -> list[int]:
        """Path root..v inclusive."""
        path = [v]
        while path[-1] != 0:
            path.append(self.parents[path[-1]])
        return path[::-1]

    @classmethod
    def from_candidates(cls, root_token: int, candidates, row_budget=DEFAULT_ROW_BUDGET):
        """Product tree: candidates[j] lists the depth-(j+1) tokens attached
        under every depth-j node."""
        config = BranchConfig(tuple(len(c) for c in candidates), row_budget)
        tokens, depths, parents, ranks = [int(root_token)], [0], [-1], [0]
        level = [0]
        for j, cand in enumerate(candidates):
            if len(set(cand)) != len(cand):
                raise ShapeError(f"depth {j + 1} candidates must be distinct")
            new_level = []
            for parent in level:
                for r, tok in enumerate(cand):
                    new_level.append(len(tokens))
                    tokens.append(int(tok))
                    depths.append(j + 1)
                    parents.append(parent)
                    ranks.append(r)
            level = new_level
        return cls(config=config, tokens=tokens, depths=depths,
                   parents=parents, ranks=ranks)


def top_k_tokens(logits, k: int) -> list[int]:
    """Deterministic top-k: by logit descending, ties broken by lower id."""
    logits = np.asarray(logits, dtype=np.float64).ravel()
    if k > logits.size:
        raise ShapeError(f"top-{k} from vocab {logits.size}")
    order = np.lexsort((np.arange(logits.size), -logits))
    return [int(t) for t in order[:k]]


def build_draft_tree(slot_logits, config: BranchConfig, root_token: int) -> DraftTree:
    """Per-depth top-b_j candidates from the forecast-slot logits."""
    slot_logits = np.asarray(slot_logits)
    if slot_logits.shape[0] < config.depth:
        raise ShapeError(
            f"need logits for {config.depth} slots, got {slot_logits.shape[0]}")
    candidates = [top_k_tokens(slot_logits[j], b)
                  for j, b in enumerate(config.branches)]
    return DraftTree.from_candidates(root_token, candidates, config.row_budget)


# -- masks -------------------------------------------------------------------


def build_warmup_mask(prefix_len: int, prompt_len: int, m: int) -> AttentionMask:
    """First-step mask: prefix rows are causal among themselves, prompt rows
    are causal and never see the prefix, forecast rows see everything
    before them (prefix included)."""
    total = prefix_len + prompt_len + m
    mask = np.full((total, total), NEG, dtype=np.float32)
    for r in range(prefix_len):
        mask[r, : r + 1] = 0.0
    for j in range(prompt_len):
        r = prefix_len + j
        mask[r, prefix_len: r + 1] = 0.0
    for k in range(m):
        r = prefix_len + prompt_len + k
        mask[r, : r + 1] = 0.0
    return AttentionMask(mask)


def build_verify_mask(cached_len: int, prefix_len: int, tree: DraftTree,
                      m: int) -> AttentionMask:
    """Step mask over [cached rows | token rows | forecast groups].

    Token rows see the cached context (minus the prefix) plus their ancestor
    chain; forecast row k of group g additionally sees the prefix and the
    earlier slots of its own group.  Nothing crosses sibling branches.
    """
    tr = tree.n_nodes
    rows = tr * (1 + m)
    cols = cached_len + rows
    mask = np.full((rows, cols), NEG, dtype=np.float32)
    anc = [tree.ancestors(v) for v in range(tr)]
    for v in range(tr):
        mask[v, prefix_len:cached_len] = 0.0
        for a in anc[v]:
            mask[v, cached_len + a] = 0.0
    for g in range(tr):
        for k in range(1, m + 1):
            r = tr + g * m + (k - 1)
            mask[r, :cached_len] = 0.0
            for a in anc[g]:
                mask[r, cached_len + a] = 0.0
            for j in range(k):
                mask[r, cached_len + tr + g * m + j] = 0.0
    return AttentionMask(mask)


# -- step assembly ---------------------------------------------------------------


@dataclass
class StepInput:
    tokens: list[int]          # -1 where injected
    injections: dict
    positions: np.ndarray
    mask: AttentionMask
    row_kinds: list[str]       # "token" or "forecast"
    token_rows: int
    forecast_rows: int


def assemble_step_input(tree: DraftTree, fs: ForecastState, *, cached_len: int,
                        root_position: int, m: int | None = None) -> StepInput:
    """Rows for one verify step: token rows in tree order, then m forecast
    rows per token row, all position-aligned to the tree depths."""
    m = tree.config.depth if m is None else m
    if m > fs.max_depth:
        raise ShapeError(f"forecast state has {fs.max_depth} slots, need {m}")
    tr = tree.n_nodes
    total = tr * (1 + m)
    if total != (1 + tree.config.draft_count) * (1 + m):
        raise BudgetError("row count does not match the branch arithmetic")
    if total > tree.config.row_budget:
        raise BudgetError(f"{total} rows exceed budget {tree.config.row_budget}")
    tokens = list(tree.tokens) + [-1] * (tr * m)
    injections = {}
    positions = np.empty(total, dtype=np.int64)
    kinds = ["token"] * tr + ["forecast"] * (tr * m)
    for v in range(tr):
        positions[v] = root_position + tree.depths[v]
    for g in range(tr):
        for k in range(1, m + 1):
            r = tr + g * m + (k - 1)
            injections[r] = fs.slots[k - 1]
            positions[r] = root_position + tree.depths[g] + k
    mask = build_verify_mask(cached_len, fs.prefix_len, tree, m)
    return StepInput(tokens=tokens, injections=injections, positions=positions,
                     mask=mask, row_kinds=kinds, token_rows=tr,
                     forecast_rows=tr * m)


# -- verification --------------------------------------------------------------------


@dataclass
class VerificationResult:
    accepted_path: list[int]   # node indices, root first
    accepted_count: int        # accepted drafts + 1 (the frontier argmax)
    next_draft_source: int     # node whose forecast group seeds the next tree
    next_token: int
    new_tokens: list[int]      # accepted draft tokens + the frontier argmax

    def __post_init__(self):
        if self.accepted_count != len(self.accepted_path):
            raise ShapeError("accepted_count must equal the path length")


def verify_and_extend(token_logits, tree: DraftTree) -> VerificationResult:
    """Greedy walk from the root: a child is accepted iff its token equals
    the argmax at its parent's row; the frontier row's argmax becomes the
    next verified token."""
    token_logits = np.asarray(token_logits)
    if token_logits.shape[0] < tree.n_nodes:
        raise ShapeError("need one logits row per token row")
    path = [0]
    new_tokens = []
    cur = 0
    while True:
        target = int(np.argmax(token_logits[cur]))
        match = next((c for c in tree.children(cur)
                      if tree.tokens[c] == target), None)
        if match is None:
            return VerificationResult(
                accepted_path=path, accepted_count=len(path),
                next_draft_source=cur, next_token=target,
                new_tokens=new_tokens + [target])
        path.append(match)
        new_tokens.append(target)
        cur = match


# -- drafters ---------------------------------------------------------------------


class LogitsDrafter:
    """Drafts from the model's own forecast-slot logits (the deployed mode)."""

    name = "loaded"

    def propose(self, slot_logits, config, emitted):
        return [top_k_tokens(slot_logits[j], b)
                for j, b in enumerate(config.branches)]


class RandomDrafter:
    """Distinct random tokens per depth; a correctness stress."""

    name = "random"

    def __init__(self, vocab_size: int, seed: int = 0):
        self.vocab = vocab_size
        self.rng = np.random.default_rng(np.random.SeedSequence((seed, 0xD1)))

    def propose(self, slot_logits, config, emitted):
        return [[int(t) for t in
                 self.rng.choice(self.vocab, size=b, replace=False)]
                for b in config.branches]


class OracleDrafter:
    """Drafts copied from a lookahead greedy run: always accepted."""

    name = "oracle"

    def __init__(self, reference, vocab_size: int):
        self.reference = list(reference)
        self.vocab = vocab_size

    def _true_token(self, emitted, depth):
        idx = emitted - 1 + depth
        if idx >= len(self.reference):
            return None
        return self.reference[idx]

    def propose(self, slot_logits, config, emitted):
        cands = []
        for j, b in enumerate(config.branches):
            true = self._true_token(emitted, j + 1)
            if true is None:
                true = 0
            cands.append([(true + i) % self.vocab for i in range(b)])
        return cands


class NoisyOracleDrafter(OracleDrafter):
    """Oracle drafts, each true token independently corrupted with
    probability 1 - accept_prob."""

    def __init__(self, reference, vocab_size, accept_prob: float, seed: int = 0):
        super().__init__(reference, vocab_size)
        if not 0.0 <= accept_prob <= 1.0:
            raise ShapeError("accept_prob must be in [0, 1]")
        self.accept_prob = accept_prob
        self.rng = np.random.default_rng(np.random.SeedSequence((seed, 0xA0)))
        self.name = f"noisy-oracle:{accept_prob}"

    def propose(self, slot_logits, config, emitted):
        cands = super().propose(slot_logits, config, emitted)
        for j, b in enumerate(config.branches):
            if self.rng.random() > self.accept_prob:
                true = cands[j][0]
                cands[j][0] = (true + b) % self.vocab  # never the true token
        return cands


def make_drafter(name: str, *, vocab_size: int, reference=None, seed=0):
    if name == "loaded":
        return LogitsDrafter()
    if name == "random":
        return RandomDrafter(vocab_size, seed)
    if name == "oracle":
        return OracleDrafter(reference, vocab_size)
    if name.startswith("noisy-oracle"):
        prob = float(name.split(":", 1)[1]) if ":" in name else 0.6
        return NoisyOracleDrafter(reference, vocab_size, prob, seed)
    raise ValueError(f"unknown drafter {name!r}")


# -- decode loop -------------------------------------------------------------------


@dataclass
class SpeculativeStats:
    decode_steps: int = 0
    decode_tokens: int = 0
    rows_per_step: int = 0
    accepted_depth_counts: dict = field(default_factory=dict)

    @property
    def tokens_per_inference(self) -> float:
        return self.decode_tokens / self.decode_steps if self.decode_steps else 0.0

    def to_dict(self):
        return {"decode_steps": self.decode_steps, "decode_tokens": self.decode_tokens,
                "tokens_per_inference": self.tokens_per_inference,
                "rows_per_step": self.rows_per_step,
                "accepted_depth_counts": dict(self.accepted_depth_counts)}


@dataclass
class SpeculativeResult:
    tokens: list[int]
    stats: SpeculativeStats


def run_warmup(session: DecodeSession, prompt, fs: ForecastState, m: int):
    """Step 1: prefix + prompt + m forecast rows; caches prefix and prompt,
    returns (first verified token, slot logits)."""
    p, q = fs.prefix_len, len(prompt)
    total = p + q + m
    tokens = [-1] * p + list(prompt) + [-1] * m
    injections = {i: fs.prefix[i] for i in range(p)}
    for k in range(m):
        injections[p + q + k] = fs.slots[k]
    positions = np.concatenate([
        np.arange(p), np.arange(q), np.arange(q, q + m)]).astype(np.int64)
    mask = build_warmup_mask(p, q, m)
    logits = session.forward(tokens, mask, positions=positions,
                             write_rows=np.arange(total), injections=injections)
    first = int(np.argmax(logits[p + q - 1]))
    slot_logits = logits[p + q: p + q + m]
    session.cache.truncate(p + q)  # forecast rows are per-step transients
    return first, slot_logits


def run_speculative(session: DecodeSession, prompt, config: BranchConfig,
                    fs: ForecastState, drafter, max_tokens: int,
                    eos=None) -> SpeculativeResult:
    """Generate >= max_tokens greedy tokens (whole steps; the final step is
    not clipped), verifying the drafter's trees against the model."""
    cfg = session.config
    m = config.depth
    prompt = list(prompt)
    first, slot_logits = run_warmup(session, prompt, fs, m)
    emitted = [first]
    stats = SpeculativeStats(rows_per_step=config.total_rows)
    root = first
    root_pos = len(prompt)

    while len(emitted) < max_tokens and emitted[-1] != eos:
        cands = drafter.propose(slot_logits, config, len(emitted))
        tree = DraftTree.from_candidates(root, cands, config.row_budget)
        fill = session.cache.fill_count
        step = assemble_step_input(tree, fs, cached_len=fill,
                                   root_position=root_pos)
        if fill + len(step.tokens) > cfg.max_seq_len:
            raise CapacityError("speculative step exceeds cache capacity")
        logits = session.forward(
            step.tokens, step.mask, positions=step.positions,
            write_rows=np.arange(fill, fill + len(step.tokens)),
            injections=step.injections)
        res = verify_and_extend(logits[: tree.n_nodes], tree)
        # keep only the accepted path's rows as verified context
        session.cache.keep_rows([fill + v for v in res.accepted_path], fill)
        group = res.next_draft_source
        start = tree.n_nodes + group * m
        slot_logits = logits[start: start + m]
        emitted.extend(res.new_tokens)
        stats.decode_steps += 1
        stats.decode_tokens += len(res.new_tokens)
        d = res.accepted_count - 1
        stats.accepted_depth_counts[d] = stats.accepted_depth_counts.get(d, 0) + 1
        root = res.next_token
        root_pos += res.accepted_count
    if eos is not None and eos in emitted:
        emitted = emitted[: emitted.index(eos) + 1]
    return SpeculativeResult(tokens=emitted, stats=stats)


def run_speculative_fresh(weights: ModelWeights, prompt, config, fs, drafter,
                          max_tokens, eos=None, **session_kw) -> SpeculativeResult:
    return run_speculative(DecodeSession(weights, **session_kw), prompt, config,
                           fs, drafter, max_tokens, eos=eos)


def prompt_row_logits_ablation(weights: ModelWeights, prompt, fs: ForecastState,
                               m: int):
    """Prompt-row logits with and without the lookahead rows attached.

    The masks keep prompt rows blind to the prefix and forecast rows, so the
    two must agree; this is the isolation check for the shared graph.
    """
    session = DecodeSession(weights)
    p, q = fs.prefix_len, len(prompt)
    tokens = [-1] * p + list(prompt) + [-1] * m
    injections = {i: fs.prefix[i] for i in range(p)}
    for k in range(m):
        injections[p + q + k] = fs.slots[k]
    positions = np.concatenate([np.arange(p), np.arange(q),
                                np.arange(q, q + m)]).astype(np.int64)
    with_rows = session.forward(tokens, build_warmup_mask(p, q, m),
                                positions=positions,
                                write_rows=np.arange(p + q + m),
                                injections=injections)[p: p + q]
    plain = DecodeSession(weights).prefill(list(prompt))
    return with_rows, plain


# -- branch-configuration search --------------------------------------------------


@dataclass
class AcceptanceModel:
    """Per-depth drafter skill: the chance any single candidate at depth j is
    the true token is depth_skill[j-1]; b candidates hit with
    1 - (1 - s)^b.  Expected tokens/inference follows the chain product."""

    depth_skill: tuple

    def hit_prob(self, depth_index: int, width: int) -> float:
        s = self.depth_skill[min(depth_index, len(self.depth_skill) - 1)]
        return 1.0 - (1.0 - s) ** width

    def expected_tokens_per_inference(self, config: BranchConfig) -> float:
        total, chain = 1.0, 1.0
        for j, b in enumerate(config.branches):
            chain *= self.hit_prob(j, b)
            total += chain
        return total


@dataclass
class StepCostModel:
    """cost(step) = c0 + c1 * input_rows, in seconds."""

    c0: float
    c1: float

    def cost(self, rows: int) -> float:
        return self.c0 + self.c1 * rows


def measure_step_cost(weights: ModelWeights, row_counts=(2, 8, 16, 32),
                      repeats: int = 3) -> StepCostModel:
    """Least-squares fit of per-forward wall time against input rows."""
    times = []
    for rows in row_counts:
        best = float("inf")
        for _ in range(repeats):
            session = DecodeSession(weights)
            mask = AttentionMask.causal(rows, 0)
            tokens = [i % weights.config.vocab_size for i in range(rows)]
            t0 = time.perf_counter()
            session.forward(tokens, mask)
            best = min(best, time.perf_counter() - t0)
        times.append(best)
    a = np.vstack([np.ones(len(row_counts)), np.array(row_counts)]).T
    c0, c1 = np.linalg.lstsq(a, np.array(times), rcond=None)[0]
    return StepCostModel(c0=max(float(c0), 0.0), c1=max(float(c1), 1e-12))


@dataclass
class ConfigScore:
    config: BranchConfig
    tokens_per_inference: float
    tokens_per_second: float
    is_best: bool = False

    def to_dict(self):
        return {"config": self.config.label(), "total_rows": self.config.total_rows,
                "tokens_per_inference": self.tokens_per_inference,
                "tokens_per_second": self.tokens_per_second, "is_best": self.is_best}


def optimize_branch_config(configs, *, acceptance_model: AcceptanceModel = None,
                           measure=None, cost_model: StepCostModel = None) -> list[ConfigScore]:
    """Rank configs by measured or modeled tokens/inference (ties: fewer
    rows, then lexicographic); the argmax is flagged."""
    if (acceptance_model is None) == (measure is None):
        raise ValueError("provide exactly one of acceptance_model or measure")
    cost_model = cost_model or StepCostModel(c0=0.0, c1=1e-3)
    scores = []
    for config in configs:
        tpi = (acceptance_model.expected_tokens_per_inference(config)
               if acceptance_model is not None else measure(config))
        tps = tpi / cost_model.cost(config.total_rows)
        scores.append(ConfigScore(config=config, tokens_per_inference=tpi,
                                  tokens_per_second=tps))
    scores.sort(key=lambda s: (-s.tokens_per_inference,
                               s.config.total_rows, s.config.branches))
    if scores:
        scores[0].is_best = True
    return scores


def simulate_expected_tokens_per_inference(m: int, accept_prob: float,
                                           n_tokens: int, trials: int = 2000,
                                           seed: int = 0) -> float:
    """Monte-Carlo oracle for the noisy-oracle drafter: per step the chain of
    true-path drafts survives with prob accept_prob each, capped at depth m."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5E)))
    ratios = []
    for _ in range(trials):
        emitted = steps = 0
        while emitted < n_tokens:
            accepted = 0
            while accepted < m and rng.random() <= accept_prob:
                accepted += 1
            emitted += 1 + accepted
            steps += 1
        ratios.append(emitted / steps)
    return float(np.mean(ratios))
