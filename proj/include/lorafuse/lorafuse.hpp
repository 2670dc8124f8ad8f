// Copyright 2026 The lorafuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "lorafuse/adapter.hpp"
#include "lorafuse/container.hpp"
#include "lorafuse/dataset.hpp"
#include "lorafuse/error.hpp"
#include "lorafuse/evaluate.hpp"
#include "lorafuse/fusion.hpp"
#include "lorafuse/judge.hpp"
#include "lorafuse/lambda_search.hpp"
#include "lorafuse/matrix.hpp"
#include "lorafuse/metrics.hpp"
#include "lorafuse/model.hpp"
#include "lorafuse/pipeline.hpp"
#include "lorafuse/records.hpp"
#include "lorafuse/refusal.hpp"
#include "lorafuse/tokenizer.hpp"
#include "lorafuse/train.hpp"
