"""Reference applications: scheduled Lasso and data-parallel metric learning."""
