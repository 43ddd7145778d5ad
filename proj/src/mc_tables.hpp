#pragma once

namespace rmvps::mc {

extern const int kEdgeTable[256];
extern const int kTriangleTable[256][16];

}  // namespace rmvps::mc
