from .augment import AugmentSpec, augment, flip_horizontal
from .dataset import (
    SPLITS,
    FewShotDataset,
    ImageSample,
    encode_png,
    preprocess,
    scan_dataset,
    scan_layout,
    write_dataset,
)
from .sampling import Episode, EpisodeBatch, TripletBatch, episode_batch, sample_episode, triplet_batches
from .synth import nearest_centroid_accuracy, planted_query, quadrant_box, quadrant_of, synth_generate

__all__ = [
    "SPLITS", "AugmentSpec", "Episode", "EpisodeBatch", "FewShotDataset", "ImageSample", "TripletBatch",
    "augment", "encode_png", "episode_batch", "flip_horizontal", "nearest_centroid_accuracy",
    "planted_query", "preprocess", "quadrant_box", "quadrant_of", "sample_episode", "scan_dataset",
    "scan_layout", "synth_generate", "triplet_batches", "write_dataset",
]
