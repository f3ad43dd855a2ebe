"""Small-footprint highway DNN acoustic model toolkit.

Plain and highway feedforward networks with tied, bias-free gates;
frame-level cross-entropy and teacher-student objectives with
temperature; lattice-based expected-accuracy sequence training; and
unsupervised speaker adaptation. Ships with a synthetic corpus
generator and a CLI so every pipeline runs end to end at desk scale.
"""

from .losses import LossResult, SoftTargets, ce_loss, hybrid_loss, kd_loss
from .network import (GradientSet, Network, NetworkConfig, backward, build,
                      count_params, forward, forward_packed, pack_gates,
                      param_partition)
from .numerics import Rng, log_sum_exp, sigmoid, softmax_with_temperature, uniform_init
from .sequence import (Arc, Lattice, LatticeError, SmbrConfig, SmbrResult,
                       estimate_state_priors, forward_backward, smbr_kd_objective,
                       smbr_objective)
from .trainer import (EpochReport, FrameDataset, SequenceExample, TrainConfig,
                      adapt, distill, evaluate_frame_error, sequence_train,
                      sgd_step, train_ce)
from .workbench import (CorpusSpec, Utterance, build_lattice, gen_corpus,
                        load_model, make_corpus_spec, save_model, splice)

__version__ = "0.1.0"
