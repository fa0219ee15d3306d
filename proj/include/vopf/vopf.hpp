#pragma once

#include "vopf/common.hpp"
#include "vopf/netmodel.hpp"
#include "vopf/acpf.hpp"
#include "vopf/oracle.hpp"
#include "vopf/recon.hpp"
#include "vopf/dataset.hpp"
#include "vopf/nnet.hpp"
#include "vopf/evalkit.hpp"
