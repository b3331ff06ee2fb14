//! Report generation, zero-shot prompting, linear probing, fine-tuning and
//! the label-efficiency harness.

pub mod auroc;
pub mod finetune;
pub mod generate;
pub mod probe;
pub mod zeroshot;

pub use auroc::{auroc, macro_auroc_ovr};
pub use finetune::{
    fine_tune, stratified_subset, subset_fraction_harness, Classifier, FineTuneConfig,
    HarnessConfig, InitMode, LabeledBag, SubsetCell, SubsetReport, SubsetRun,
};
pub use generate::{generate_report, Generation};
pub use probe::{fit_logistic, linear_probe, LogisticModel, ProbeConfig, ProbeResult};
pub use zeroshot::{
    embed_prompt, embed_slide, zero_shot_classify, PromptEmbeddings, PromptSet, ZeroShotResult,
};
