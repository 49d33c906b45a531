"""Active object grounding: knowledge-enriched word-region alignment with
detection (AP) and tracking (OPE / OPE-Det, SS / NPS) evaluation harnesses."""

__version__ = "0.1.0"

from .estimator import ActiveObjectGrounder
from .geometry import BBox, iou, normalized_center_distance
from .knowledge import (EntityExtraction, Instruction, KnowledgeBundle, PromptTemplates,
                        extract_bundle, heuristic_arg1, select_grounding_phrase)
from .llm import HttpLlmClient, LlmClientConfig, ReplayLlmClient
from .prompts import (FrameType, GroundingPrompt, Role, RoleMask, assemble_grounding_text,
                      build_role_masks, tokenize)
from .scenes import (Episode, Frame, Region, SceneConfig, TrackSequence, generate_corpus,
                     generate_episode, generate_track_sequence, jitter_frames, load_episodes,
                     load_sequences)

__all__ = [
    "ActiveObjectGrounder",
    "BBox", "iou", "normalized_center_distance",
    "EntityExtraction", "Instruction", "KnowledgeBundle", "PromptTemplates",
    "extract_bundle", "heuristic_arg1", "select_grounding_phrase",
    "HttpLlmClient", "LlmClientConfig", "ReplayLlmClient",
    "FrameType", "GroundingPrompt", "Role", "RoleMask",
    "assemble_grounding_text", "build_role_masks", "tokenize",
    "Episode", "Frame", "Region", "SceneConfig", "TrackSequence",
    "generate_corpus", "generate_episode", "generate_track_sequence",
    "jitter_frames", "load_episodes", "load_sequences",
    "__version__",
]
