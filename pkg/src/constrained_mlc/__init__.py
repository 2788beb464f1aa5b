"""Coherent multi-label prediction under stratified normal rules."""

from .circuit import ConstraintCircuit, compile_rules, decompile, load_circuit, save_circuit
from .loss import bce_loss, closs, closs_hmc, closs_targets, cm_bce, cm_bce_hmc
from .metrics import MetricReport, UndefinedMetricError, au_prc, mc_metrics
from .module import cm_forward, cm_forward_hmc, predict
from .nn import MlpModel, TrainConfig, TrainedSystem, init_model, load_checkpoint, save_checkpoint, train
from .rules import ClassTable, Rule, RuleSet, RuleSyntaxError, hierarchy_to_rules, parse_rules, serialize_rules
from .semantics import check_constraint_violation, check_logical_violation, stable_model
from .strata import NotStratifiedError, check_stratified, comp_strata

compile = compile_rules  # noqa: A001

__all__ = [
    "ClassTable", "ConstraintCircuit", "MetricReport", "MlpModel", "NotStratifiedError", "Rule", "RuleSet",
    "RuleSyntaxError", "TrainConfig", "TrainedSystem", "UndefinedMetricError", "au_prc", "bce_loss",
    "check_constraint_violation", "check_logical_violation", "check_stratified", "closs", "closs_hmc",
    "closs_targets", "cm_bce", "cm_bce_hmc", "cm_forward", "cm_forward_hmc", "comp_strata", "compile",
    "compile_rules", "decompile", "hierarchy_to_rules", "init_model", "load_checkpoint", "load_circuit",
    "mc_metrics", "parse_rules", "predict", "save_checkpoint", "save_circuit", "serialize_rules", "stable_model",
    "train",
]  # fmt: skip
