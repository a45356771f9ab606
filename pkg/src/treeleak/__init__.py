"""Simulation of tree ensemble training over vertically partitioned data,
the transcript-based label-inference attack, and the defenses against it."""

from .datasets import (Dataset, PartitionSpec, VerticalView, feature_label_mi,
                       gen_synthetic, load_csv, make_partition,
                       minmax_normalize, train_test_split)
from .trees import (RANDOM_FOREST, XGBOOST, BoosterParams, Split,
                    SplitStatistics, Tree, TreeModel, TreeNode, gini_gain,
                    grad_hess, grow_local_tree, leaf_weight,
                    percentile_thresholds, predict, xgb_gain)
from .protocol import (CommStats, DefenseConfig, Party, PartyTranscript,
                       ProtocolConfig, SplitCandidate, TrainResult,
                       TranscriptEvent, build_parties, comm_rate,
                       propose_splits, train_federated)
from .attack import (AdjacencyGraph, AttackerView, AttackParams,
                     ClusterResult, CommunityAssignment, attack_cl,
                     attack_id2graph, attack_uni, attack_uni_cl,
                     attacker_view_from_model, attacker_view_from_transcript,
                     build_adjacency, build_adjacency_chunked, kmeans,
                     kmeans_block, louvain, modularity)
from .ldp import (GraftReport, NoisyLabels, grafting, lp_mst,
                  randomized_response, rr_keep_probability, rr_with_prior)
from .idlmid import (NodeClassCounts, admissible, children_admissible,
                     counts_for_space, decrypt_purity, encrypt_onehot_labels,
                     mi_upper_bound, mi_upper_bound_batch, secure_node_purity)
from .paillier import (HECiphertext, HEKeypair, HEPublicKey, IntegrityError,
                       he_add, he_decrypt, he_encrypt, he_keygen,
                       he_scalar_mul, he_sum)
from .metrics import (ContingencyTable, aggregate, auc, format_mean_std,
                      mean_std, v_measure)
from .audit import AuditReport, audit_gain_optimality, audit_transcript

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
