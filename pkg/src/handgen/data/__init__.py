from .crop import BBox, BBoxError, CropTransform, crop_local, square_crop_window
from .dataset import Sample, generate_dataset, load_dataset, load_png, save_png
from .prompts import default_vocabulary, load_tagging_corpus, make_prompt
from .render import PoseError, SyntheticHandPose, canonical_pose, hand_keypoints, render_condition
from .tagging import TokenizedPrompt, Vocabulary, split_words, tag_hand_tokens

__all__ = [
    "BBox",
    "BBoxError",
    "CropTransform",
    "PoseError",
    "Sample",
    "SyntheticHandPose",
    "TokenizedPrompt",
    "Vocabulary",
    "canonical_pose",
    "crop_local",
    "default_vocabulary",
    "generate_dataset",
    "hand_keypoints",
    "load_dataset",
    "load_png",
    "load_tagging_corpus",
    "make_prompt",
    "render_condition",
    "save_png",
    "split_words",
    "square_crop_window",
    "tag_hand_tokens",
]
