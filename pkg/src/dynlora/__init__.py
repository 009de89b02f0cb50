"""Dynamic LoRA fine-tuning engine and baseline comparison harness."""
