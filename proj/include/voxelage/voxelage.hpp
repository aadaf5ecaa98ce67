// SPDX-License-Identifier: MIT
#pragma once

#include "voxelage/common.hpp"
#include "voxelage/config.hpp"
#include "voxelage/evaluate.hpp"
#include "voxelage/imageio.hpp"
#include "voxelage/interpret.hpp"
#include "voxelage/losses.hpp"
#include "voxelage/models.hpp"
#include "voxelage/nifti.hpp"
#include "voxelage/nn/adam.hpp"
#include "voxelage/nn/checkpoint.hpp"
#include "voxelage/phantom.hpp"
#include "voxelage/preprocess.hpp"
#include "voxelage/rng.hpp"
#include "voxelage/sampling.hpp"
#include "voxelage/tensor.hpp"
#include "voxelage/training.hpp"
#include "voxelage/volume.hpp"
