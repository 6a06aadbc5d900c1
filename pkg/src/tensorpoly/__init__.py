"""Entangled-tensor LoRA adapters, latent-expert routing and a planted multi-task harness."""
from .adapters import (
    AdapterLayer,
    LoRAAdapter,
    TLoRAFactors,
    lora_forward,
    param_count,
    tensorized_vector_count,
    tlora_forward,
    tlora_materialize,
)
from .gradients import backward_layer, finite_diff, forward_layer
from .harness import ExperimentConfig, adapt, evaluate, gen_multitask, pretrain
from .routing import (
    RoutingLogits,
    gumbel_sigmoid,
    normalize_weights,
    poly_combine,
    tp1_combine,
    tp2_combine,
    tpx_combine,
)
from .tensor_core import (
    FactorVectorSet,
    TensorDims,
    TensorTrainCores,
    entangled_reconstruct,
    min_base,
    simple_tensor,
    tt_contract,
    tt_contract_weighted,
)

__version__ = "0.1.0"
