from .encoders import (
    EncoderConfig,
    EncoderOutput,
    ResidualBlock,
    ResidualEncoder,
    SiameseCNN,
    build_encoder,
    siamese_param_count,
)
from .heads import (
    MatchingOutput,
    PairEval,
    PrototypeSet,
    ProtoOutput,
    RelationModule,
    RelationPair,
    compute_prototypes,
    hybrid_forward,
    hybrid_loss,
    matching_forward,
    matching_loss,
    matching_scores,
    proto_classify,
    proto_episode_loss,
    proto_forward,
    relation_forward,
    relation_loss,
    relation_scores,
    siamese_pair_eval,
    siamese_triplet_step,
)
from .model import HEADS, FewShotModel, build_model, model_from_description

__all__ = [
    "HEADS", "EncoderConfig", "EncoderOutput", "FewShotModel", "MatchingOutput", "PairEval",
    "PrototypeSet", "ProtoOutput", "RelationModule", "RelationPair", "ResidualBlock",
    "ResidualEncoder", "SiameseCNN", "build_encoder", "build_model", "compute_prototypes",
    "hybrid_forward", "hybrid_loss", "matching_forward", "matching_loss", "matching_scores",
    "model_from_description", "proto_classify", "proto_episode_loss", "proto_forward",
    "relation_forward", "relation_loss", "relation_scores", "siamese_pair_eval",
    "siamese_param_count", "siamese_triplet_step",
]
