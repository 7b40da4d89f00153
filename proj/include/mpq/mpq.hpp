#pragma once

#include "mpq/error.hpp"
#include "mpq/tensor.hpp"
#include "mpq/netcore.hpp"
#include "mpq/quantizer.hpp"
#include "mpq/parallel.hpp"
#include "mpq/perturbation.hpp"
#include "mpq/mckp.hpp"
#include "mpq/oracle.hpp"
#include "mpq/io.hpp"
#include "mpq/manifest.hpp"
#include "mpq/pipeline.hpp"
#include "mpq/version.hpp"
