#pragma once

#include "dofkit/image.hpp"
#include "dofkit/optics.hpp"
#include "dofkit/parallel.hpp"
#include "dofkit/render.hpp"
#include "dofkit/metrics.hpp"
#include "dofkit/lens_fit.hpp"
#include "dofkit/depth_align.hpp"
#include "dofkit/io.hpp"
#include "dofkit/serialize.hpp"
#include "dofkit/dataset.hpp"
