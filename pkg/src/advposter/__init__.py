"""Adversarial poster textures against crop-and-regress visual trackers."""

__version__ = "0.1.0"

from .boxes import BBox, CropRegion, bbox_to_frame, bbox_to_search, crop_region_from_bbox
from .diffcore import Tape, Tensor, grad_check
from .render import (CameraModel, LightSpec, LightingParams, Pose6D, PosterSpec,
                     RenderOutput, TargetSprite, backproject_gradient,
                     light_params_from_spec, poster_homography, render_scene)
from .scenes import (ABLATION_PRESETS, SceneDistribution, ScenePair, SceneSpec,
                     ablation_preset, sample_scene_pair)
from .tracker import (TrackerWeights, TrainConfig, extract_crop, load_weights,
                      predict, save_weights, synth_tracking_dataset, train)
from .attack import (AttackConfig, AttackRun, LossSpec, adversarial_loss,
                     attack_step, eot_expected_gradient, run_attack,
                     scene_loss_and_texture_grad)
from .evaluation import (EvalReport, ServoGains, area, evaluate_texture, iou,
                         iou_pixel_oracle, mu_ioud, servo_sim, track_sequence)
