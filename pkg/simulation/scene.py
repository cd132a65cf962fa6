"""Scene state carried between planning steps."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

from models import AgentState, Pose2D, Scenario
from tokenizer import TokenVocabulary, tokenize_trajectory

HISTORY_TOKENS = 4


@dataclass(frozen=True)
class LaneAnchor:
    """Longitudinal position of an IDM-driven agent on a lane."""
    lane_id: str
    s: float


@dataclass(frozen=True)
class SceneState:
    """Snapshot before a planning step. Index 0 is the ego; 1..N are background agents.

    ``histories`` holds the last executed tokens per agent (oldest first, padded with the vocabulary
    pad id); ``ego_trail`` the ego's last ``HISTORY_TOKENS * S`` sub-step poses, oldest first.
    """
    step: int
    agents: Tuple[AgentState, ...]
    histories: Tuple[Tuple[int, ...], ...]
    ego_trail: Tuple[Pose2D, ...]
    anchors: Tuple[Optional[LaneAnchor], ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "agents", tuple(self.agents))
        object.__setattr__(self, "histories", tuple(tuple(h) for h in self.histories))
        object.__setattr__(self, "ego_trail", tuple(self.ego_trail))
        anchors = tuple(self.anchors) if self.anchors else (None,) * len(self.agents)
        object.__setattr__(self, "anchors", anchors)
        if len(self.histories) != len(self.agents) or len(self.anchors) != len(self.agents):
            raise ValueError("histories/anchors must have one entry per agent")

    @property
    def ego(self) -> AgentState:
        return self.agents[0]

    @property
    def num_agents(self) -> int:
        return len(self.agents)

    def advanced(
        self,
        agents: Sequence[AgentState],
        tokens: Sequence[int],
        ego_substeps: Sequence[AgentState],
        anchors: Optional[Sequence[Optional[LaneAnchor]]] = None,
    ) -> "SceneState":
        """Next scene after every agent executed one token."""
        histories = tuple((hist + (tok,))[-len(hist):] for hist, tok in zip(self.histories, tokens))
        trail = (self.ego_trail + tuple(s.pose for s in ego_substeps))[-len(self.ego_trail):]
        return replace(
            self,
            step=self.step + 1,
            agents=tuple(agents),
            histories=histories,
            ego_trail=trail,
            anchors=tuple(anchors) if anchors is not None else self.anchors,
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "step": self.step,
            "agents": [a.to_list() + [a.box.length, a.box.width] for a in self.agents],
            "histories": [list(h) for h in self.histories],
            "ego_trail": [list(p.to_tuple()) for p in self.ego_trail],
            "anchors": [None if a is None else [a.lane_id, a.s] for a in self.anchors],
        }

    @staticmethod
    def from_dict(data: Dict[str, Any]) -> "SceneState":
        return SceneState(
            step=int(data["step"]),
            agents=tuple(AgentState.from_list(row[:4], row[4:6]) for row in data["agents"]),
            histories=tuple(tuple(int(t) for t in h) for h in data["histories"]),
            ego_trail=tuple(Pose2D(*p) for p in data["ego_trail"]),
            anchors=tuple(None if a is None else LaneAnchor(str(a[0]), float(a[1])) for a in data.get("anchors", [])),
        )


def initial_scene(scenario: Scenario, vocab: TokenVocabulary, history_tokens: int = HISTORY_TOKENS) -> SceneState:
    """Scene at t=0: padded histories and a stationary ego trail."""
    agents = (scenario.ego_init,) + tuple(scenario.agents_init)
    pad = (vocab.pad_id,) * history_tokens
    trail = (scenario.ego_init.pose,) * (history_tokens * vocab.substeps)
    return SceneState(step=0, agents=agents, histories=(pad,) * len(agents), ego_trail=trail)


@dataclass(frozen=True)
class ScenarioTokens:
    """Closed-loop token sequences of the expert (index 0) and every logged agent."""
    sequences: Tuple[Tuple[int, ...], ...]

    @property
    def expert(self) -> Tuple[int, ...]:
        return self.sequences[0]


def tokenize_scenario(scenario: Scenario, vocab: TokenVocabulary) -> ScenarioTokens:
    trajectories = (scenario.expert,) + tuple(scenario.agent_logs)
    return ScenarioTokens(tuple(tuple(tokenize_trajectory(t, vocab)) for t in trajectories))


def logged_scene(
    scenario: Scenario,
    t: int,
    vocab: TokenVocabulary,
    tokens: ScenarioTokens,
    history_tokens: int = HISTORY_TOKENS,
) -> SceneState:
    """Scene at planning step ``t`` taken straight from the logs (expert ego, logged agents)."""
    substeps = vocab.substeps
    idx = t * substeps
    agents = (scenario.expert.states[idx],) + tuple(log.states[idx] for log in scenario.agent_logs)
    histories: List[Tuple[int, ...]] = []
    for seq in tokens.sequences:
        past = tuple(seq[max(0, t - history_tokens):t])
        histories.append((vocab.pad_id,) * (history_tokens - len(past)) + past)
    trail_len = history_tokens * substeps
    trail = tuple(scenario.expert.states[max(0, k)].pose for k in range(idx - trail_len + 1, idx + 1))
    return SceneState(step=t, agents=agents, histories=tuple(histories), ego_trail=trail)
