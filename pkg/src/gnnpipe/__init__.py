"""Hybrid CPU/accelerator mini-batch GNN training runtime and simulator."""

from .graph import (DATASET_PRESETS, DatasetDescriptor, Graph, S_FEAT_BYTES,
                    build_csr, gather_features, generate_synthetic,
                    load_binary_csr, load_edge_list_file, save_binary_csr)
from .sampling import MiniBatch, SamplerConfig, partition_targets, sample_minibatch
from .compute import (GCN, SAGE, ContractViolation, ForwardTape, GnnModel,
                      Gradients, TrafficCounters, aggregate_layer, backward,
                      forward, load_model, loss_and_grad, save_model, sgd_step,
                      update_layer)
from .perf import (BatchShape, DEVICE_PRESETS, DeviceSpec, PredictedTimes,
                   SamplingProfile, equal_split_assignment, initial_mapping,
                   predict_iteration, t_aggregate, t_load, t_prop, t_sync,
                   t_trainer, t_trans, t_update)
from .drm import (Assignment, DrmConfig, DrmDecision, StageTimes, balance_thread,
                  balance_work, drm_step)
from .pipeline import PipelineState, PipelineTimeline, schedule_pipeline
from .protocol import HandshakeProtocol, HandshakeTimeout
from .runtime import (HYBRID, PURE_SIM, IterationTrace, RuntimeConfig,
                      TrainingSession, run_epoch, synchronize, training_accuracy)

__version__ = "0.1.0"
