"""voxbench: a desk-scale benchmark of self-supervised pretraining
transferability for volumetric segmentation.

One shared 3D windowed-attention encoder, nine pretext objectives, few- and
many-shot fine-tuning on two synthetic modalities, and transferability
analysis via Dice, performance gaps, paired Wilcoxon tests, and layerwise CKA.
"""

from .cka import CKAMatrix, FeatureMatrix, cka, gram_linear, hsic_unbiased, layerwise_cka, minibatch_cka
from .datasets import DatasetManifest, build_manifest, load_manifest, plan_manifest
from .encoder import Encoder, EncoderConfig, ParameterSet, TokenGrid, encode, get_preset, parameter_count, patch_embed, pooled_embedding
from .finetune import CropBatch, Segmentor, SegmentorConfig, TrainRunRecord, build_segmentor, finetune_run, sample_crops, seg_loss, sliding_window_infer
from .metrics import DiceReport, GapReport, dice, dice_report, group_structures, modality_gap, performance_gap, significance_marker, wilcoxon_signed_rank
from .phantoms import LabelMap, Volume, generate_phantom, normalize_intensity, normalize_percentile
from .pretext import (
    DistillConfig,
    MaskSpec,
    MethodConfig,
    TeacherStudentState,
    ViewPair,
    apply_rotation,
    distill_ce,
    ema_update,
    loss_ibot,
    loss_infonce,
    loss_inpaint,
    loss_recon,
    loss_rotation,
    loss_simmim,
    loss_smit,
    loss_swinunetr_multi,
    pretrain_step,
    run_pretraining,
    sample_mask,
    tau_t_at,
    update_center,
)

__version__ = "0.1.0"
