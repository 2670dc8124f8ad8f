// Copyright 2026 The lorafuse Authors
// SPDX-License-Identifier: Apache-2.0

#include "lorafuse/cli.hpp"

int main(int argc, char** argv) { return lorafuse::cli::run(argc, argv); }
