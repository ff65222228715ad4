// SPDX-License-Identifier: Apache-2.0
#include "gradlens/tensor.hpp"
