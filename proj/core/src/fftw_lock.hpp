#pragma once

#include <mutex>

namespace bubbleformer {

// FFTW planning is not thread safe; every planner call takes this lock.
std::mutex& fftw_planner_mutex();

}  // namespace bubbleformer
