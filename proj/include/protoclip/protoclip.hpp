#pragma once

#include "protoclip/error.hpp"
#include "protoclip/matrix.hpp"
#include "protoclip/tape.hpp"
#include "protoclip/contrastive.hpp"
#include "protoclip/attention.hpp"
#include "protoclip/encoders.hpp"
#include "protoclip/csv.hpp"
#include "protoclip/data.hpp"
#include "protoclip/training.hpp"
#include "protoclip/checkpoint.hpp"
#include "protoclip/inference.hpp"
#include "protoclip/config.hpp"
